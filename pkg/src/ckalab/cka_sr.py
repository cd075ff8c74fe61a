"""Interlayer-similarity regularization of the training loss.

The standard variant adds, for every stage, beta * sum over ordered pairs
(i, j), i != j, of w_ij * CKA(X_i, X_j); by symmetry it is computed as
2 * beta * sum over i < j. The augmented variant instead averages CKA over
all unordered pairs of the whole network's maps (cross-stage included) and
scales by beta.

Both variants can be recorded on an autodiff Tape so gradients reach the
captured activations, or evaluated as plain floats through the same graph.
Pairs involving a zero-variance map are skipped and counted (logged); only
if every pair degenerates does the loss raise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DegenerateFeatureError
from .similarity import SELF_HSIC_FLOOR, FeatureMap

__all__ = [
    "CkaSrConfig",
    "StageCapture",
    "cka_sr_loss",
    "aug_cka_sr_loss",
    "cka_sr_term",
    "aug_cka_sr_term",
    "should_apply",
    "subsample",
]

log = logging.getLogger(__name__)

PAIR_WEIGHT_SCHEMES = ("uniform", "adjacent")
VARIANTS = ("standard", "augmented")


@dataclass
class CkaSrConfig:
    """Configuration of the similarity regularizer.

    beta: weight of the regularization term (>= 0).
    pair_weights: "uniform" (w_ij = 1), "adjacent" (w_ij = 1 iff |i-j| = 1),
        or a custom symmetric zero-diagonal table indexed by layer.
    variant: "standard" (per-stage pairs) or "augmented" (network-wide mean).
    sample_n: how many leading examples of each batch feed the regularizer
        (None = the whole batch).
    batch_m: apply the regularizer once every m batches.
    include_input_layer: whether layer 0 (the input representation)
        participates in the pairs.
    """

    beta: float = 8e-4
    pair_weights: object = "uniform"
    variant: str = "standard"
    sample_n: int | None = 8
    batch_m: int = 1
    include_input_layer: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("CkaSrConfig: beta must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"CkaSrConfig: unknown variant {self.variant!r}")
        if self.sample_n is not None and self.sample_n < 2:
            raise ValueError("CkaSrConfig: sample_n must be >= 2 (or None for all)")
        if self.batch_m < 1:
            raise ValueError("CkaSrConfig: batch_m must be >= 1")
        if isinstance(self.pair_weights, str):
            if self.pair_weights not in PAIR_WEIGHT_SCHEMES:
                raise ValueError(
                    f"CkaSrConfig: pair_weights must be one of {PAIR_WEIGHT_SCHEMES} "
                    "or a custom table"
                )
        else:
            table = np.asarray(self.pair_weights, dtype=np.float64)
            if table.ndim != 2 or table.shape[0] != table.shape[1]:
                raise ValueError("CkaSrConfig: custom pair-weight table must be square")
            if float(np.abs(table - table.T).max()) > 0:
                raise ValueError("CkaSrConfig: custom pair-weight table must be symmetric")
            if float(np.abs(np.diag(table)).max()) > 0:
                raise ValueError("CkaSrConfig: custom pair-weight table needs zero diagonal")
            self.pair_weights = table

    def weight(self, i: int, j: int) -> float:
        if isinstance(self.pair_weights, str):
            if self.pair_weights == "uniform":
                return 1.0
            return 1.0 if abs(i - j) == 1 else 0.0
        table = self.pair_weights
        if i >= table.shape[0] or j >= table.shape[0]:
            raise ValueError(
                f"CkaSrConfig: pair-weight table of size {table.shape[0]} has no "
                f"entry for layers ({i}, {j})"
            )
        return float(table[i, j])


@dataclass
class StageCapture:
    """Ordered feature maps of one stage: layer 0 is the stage input."""

    stage_index: int
    features: list[FeatureMap] = field(default_factory=list)

    def __post_init__(self):
        if self.stage_index < 1:
            raise ValueError("StageCapture: stage_index must be >= 1")
        for pos, fm in enumerate(self.features):
            if fm.layer_index != pos:
                raise ValueError(
                    f"StageCapture: layer indices must be contiguous from 0, "
                    f"got {fm.layer_index} at position {pos}"
                )
        counts = {fm.n_examples for fm in self.features}
        if len(counts) > 1:
            raise ValueError("StageCapture: example counts differ across layers")


def _map_nodes(tape: ad.Tape, feature_vars: list[tuple[int, ad.Var]]):
    """Centered gram Var + self-HSIC Var per map; None marks degenerate."""
    nodes = []
    for layer_index, var in feature_vars:
        centered = ad.center_gram(ad.gram(var))
        self_hsic = ad.frobenius_sq(centered)
        if float(self_hsic.value[0, 0]) <= SELF_HSIC_FLOOR:
            nodes.append((layer_index, None, None))
        else:
            nodes.append((layer_index, centered, self_hsic))
    return nodes


def _pair_cka_var(kc_i, hs_i, kc_j, hs_j) -> ad.Var:
    cross = ad.sum_all(ad.mul(kc_i, kc_j))
    return ad.div(cross, ad.sqrt(ad.mul(hs_i, hs_j)))


def cka_sr_term(
    tape: ad.Tape,
    stage_feature_vars: list[list[tuple[int, ad.Var]]],
    cfg: CkaSrConfig,
) -> tuple[ad.Var | None, int]:
    """Standard-variant regularizer as a Var: 2*beta*sum_s sum_{i<j} w_ij CKA.

    stage_feature_vars holds, per stage, (layer_index, Var) pairs ordered by
    layer. Returns (term, skipped_pair_count); term is None when beta is 0
    or no weighted pair survived. Raises DegenerateFeatureError when every
    weighted pair was degenerate.
    """
    if cfg.variant != "standard":
        raise ValueError("cka_sr_term: config variant must be 'standard'")
    if not stage_feature_vars:
        raise ValueError("cka_sr_term: no stage captures supplied")
    for maps in stage_feature_vars:
        if len(maps) < 2:
            raise ValueError("cka_sr_term: every stage needs at least 2 feature maps")
    if cfg.beta == 0.0:
        return None, 0

    term = None
    skipped = 0
    candidates = 0
    for maps in stage_feature_vars:
        usable = [m for m in maps if cfg.include_input_layer or m[0] != 0]
        nodes = _map_nodes(tape, usable)
        for a in range(len(nodes)):
            for b in range(a + 1, len(nodes)):
                li, kc_i, hs_i = nodes[a]
                lj, kc_j, hs_j = nodes[b]
                w = cfg.weight(li, lj)
                if w == 0.0:
                    continue
                candidates += 1
                if kc_i is None or kc_j is None or float(hs_i.value) * float(hs_j.value) < ad.GUARD:
                    skipped += 1
                    continue
                piece = ad.smul(_pair_cka_var(kc_i, hs_i, kc_j, hs_j), 2.0 * cfg.beta * w)
                term = piece if term is None else ad.add(term, piece)
    if skipped:
        log.debug("cka_sr_term: skipped %d degenerate pair(s)", skipped)
    if term is None and candidates > 0:
        raise DegenerateFeatureError("cka_sr_term: every weighted pair is degenerate")
    return term, skipped


def aug_cka_sr_term(
    tape: ad.Tape, feature_vars: list[ad.Var], beta: float
) -> tuple[ad.Var | None, int]:
    """Augmented variant: beta times the mean CKA over unordered map pairs.

    The divisor is the number of pairs actually computed, so the value stays
    within [0, beta] even when degenerate pairs are skipped.
    """
    if len(feature_vars) < 2:
        raise ValueError("aug_cka_sr_term: needs at least 2 feature maps")
    if beta == 0.0:
        return None, 0
    nodes = _map_nodes(tape, list(enumerate(feature_vars)))
    total = None
    skipped = 0
    for a in range(len(nodes)):
        for b in range(a + 1, len(nodes)):
            _, kc_i, hs_i = nodes[a]
            _, kc_j, hs_j = nodes[b]
            if kc_i is None or kc_j is None or float(hs_i.value) * float(hs_j.value) < ad.GUARD:
                skipped += 1
                continue
            piece = _pair_cka_var(kc_i, hs_i, kc_j, hs_j)
            total = piece if total is None else ad.add(total, piece)
    if skipped:
        log.debug("aug_cka_sr_term: skipped %d degenerate pair(s)", skipped)
    if total is None:
        raise DegenerateFeatureError("aug_cka_sr_term: every pair is degenerate")
    pair_count = len(nodes) * (len(nodes) - 1) // 2 - skipped
    return ad.smul(total, beta / pair_count), skipped


def cka_sr_loss(captures: list[StageCapture], cfg: CkaSrConfig) -> float:
    """Standard-variant loss value for captured features (plain float)."""
    if not captures:
        raise ValueError("cka_sr_loss: empty captures")
    if cfg.beta == 0.0:
        for sc in captures:
            if len(sc.features) < 2:
                raise ValueError("cka_sr_loss: every stage needs at least 2 feature maps")
        return 0.0
    tape = ad.Tape()
    stage_vars = [
        [(fm.layer_index, tape.leaf(fm.values)) for fm in sc.features]
        for sc in captures
    ]
    term, _ = cka_sr_term(tape, stage_vars, cfg)
    return 0.0 if term is None else float(term.value[0, 0])


def aug_cka_sr_loss(features: list[FeatureMap], beta: float) -> float:
    """Augmented-variant loss value over whole-network maps (plain float)."""
    tape = ad.Tape()
    feature_vars = [tape.leaf(fm.values) for fm in features]
    term, _ = aug_cka_sr_term(tape, feature_vars, beta)
    return 0.0 if term is None else float(term.value[0, 0])


def should_apply(batch_index: int, cfg: CkaSrConfig) -> bool:
    """True on every batch whose (global) index is a multiple of batch_m."""
    if batch_index < 0:
        raise ValueError("should_apply: batch_index must be >= 0")
    return batch_index % cfg.batch_m == 0


def subsample(batch: np.ndarray, cfg: CkaSrConfig) -> np.ndarray:
    """First min(n, sample_n) rows of the batch.

    The data shuffler already randomizes batch order, so taking the leading
    rows is an unbiased few-shot sample and keeps runs deterministic.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if cfg.sample_n is None or batch.shape[0] <= cfg.sample_n:
        return batch
    return batch[: cfg.sample_n]
