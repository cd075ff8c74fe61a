"""Sparsity measurement and pruning: epsilon-sparsity, magnitude / L1-filter /
knapsack / random masks, iterative magnitude pruning with rewinding, and the
token keep-probability adjustment.

All rankings break ties deterministically by (layer, row, col) ascending so
identical inputs always produce identical masks. Epsilon-sparsity counts
weight-matrix entries only (biases excluded) with a strict |w| < epsilon
comparison.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import DegenerateFeatureError, DimensionError
from .linalg import Rng
from .model import (
    ModelSpec,
    Params,
    RunRecord,
    SparseMask,
    TrainConfig,
    forward_capture,
    init_params,
    train,
)
from .similarity import SELF_HSIC_FLOOR, _centered_gram, _cka_from_centered

__all__ = [
    "EpsilonSparsityReport",
    "PruneResult",
    "TokenBatch",
    "MaskCollapseError",
    "epsilon_sparsity",
    "magnitude_prune",
    "l1_filter_prune",
    "knapsack_channel_prune",
    "random_sparse_mask",
    "imp_lth",
    "token_keep_probs",
    "token_select",
    "epsilon_zeroing_deviation",
    "write_prune_json",
]

log = logging.getLogger(__name__)


class MaskCollapseError(RuntimeError):
    """A pruning step removed every weight of some layer."""


@dataclass
class EpsilonSparsityReport:
    epsilon: float
    total_params: int
    small_params: int
    s_epsilon: float = field(init=False)

    def __post_init__(self):
        self.s_epsilon = self.small_params / self.total_params


@dataclass
class PruneResult:
    mask: SparseMask
    requested_ratio: float
    achieved_sparsity: float
    method: str
    removed_per_layer: list[int]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "requested_ratio": self.requested_ratio,
            "achieved_sparsity": self.achieved_sparsity,
            "removed_per_layer": self.removed_per_layer,
        }


@dataclass
class TokenBatch:
    """Per-token feature matrices (batch examples x feature dim) plus the
    tokens' base keep probabilities."""

    tokens: list[np.ndarray]
    base_keep_probs: np.ndarray

    def __post_init__(self):
        self.tokens = [np.ascontiguousarray(t, dtype=np.float64) for t in self.tokens]
        pi = np.asarray(self.base_keep_probs, dtype=np.float64)
        if pi.ndim != 1 or pi.shape[0] != len(self.tokens):
            raise DimensionError("TokenBatch: one keep probability per token required")
        if pi.min(initial=0.0) < 0.0 or pi.max(initial=0.0) > 1.0:
            raise ValueError("TokenBatch: keep probabilities must lie in [0, 1]")
        self.base_keep_probs = pi


def epsilon_sparsity(params: Params, epsilon: float) -> EpsilonSparsityReport:
    """S_eps = |{w : |w| < eps}| / |W| over all weight matrices."""
    if epsilon <= 0:
        raise ValueError("epsilon_sparsity: epsilon must be > 0")
    total = params.total_weight_count()
    small = sum(int((np.abs(w) < epsilon).sum()) for w in params.weights)
    return EpsilonSparsityReport(epsilon, total, small)


def _flat_weight_order(weights: list[np.ndarray], eligible: list[np.ndarray] | None):
    """Indices of (eligible) weight entries sorted by |w|, ties by
    (layer, row, col) ascending. Returns (order, locators) where locators is
    an (N, 3) array of layer/row/col coordinates aligned with the sort keys."""
    mags, layers, rows, cols = [], [], [], []
    for li, w in enumerate(weights):
        r, c = np.unravel_index(np.arange(w.size), w.shape)
        keep = np.ones(w.size, dtype=bool) if eligible is None else eligible[li].ravel() > 0
        mags.append(np.abs(w).ravel()[keep])
        layers.append(np.full(int(keep.sum()), li))
        rows.append(r[keep])
        cols.append(c[keep])
    mags = np.concatenate(mags)
    layers = np.concatenate(layers)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    order = np.lexsort((cols, rows, layers, mags))
    return order, np.stack([layers, rows, cols], axis=1)


def _mask_from_removals(weights, order, locators, n_remove: int) -> tuple[SparseMask, list[int]]:
    masks = [np.ones_like(w) for w in weights]
    removed = [0] * len(weights)
    for pos in order[:n_remove]:
        li, r, c = locators[pos]
        masks[li][r, c] = 0.0
        removed[li] += 1
    return SparseMask(masks), removed


def magnitude_prune(params: Params, ratio: float) -> PruneResult:
    """Mask the globally smallest floor(ratio * |W|) weights by magnitude."""
    if not 0 <= ratio < 1:
        raise ValueError("magnitude_prune: ratio must be in [0, 1)")
    total = params.total_weight_count()
    n_remove = int(np.floor(ratio * total))
    order, locators = _flat_weight_order(params.weights, None)
    mask, removed = _mask_from_removals(params.weights, order, locators, n_remove)
    return PruneResult(mask, ratio, n_remove / total, "magnitude", removed)


def l1_filter_prune(params: Params, layer: int, ratio: float) -> PruneResult:
    """Structured pruning: remove the lowest-L1 output rows of one layer.

    The downstream layer's corresponding input columns are masked too. The
    layer must have a downstream layer and at least 2 output units.
    """
    if not 0 <= ratio < 1:
        raise ValueError("l1_filter_prune: ratio must be in [0, 1)")
    if layer < 0 or layer >= len(params.weights) - 1:
        raise ValueError(
            "l1_filter_prune: layer must have a downstream layer "
            f"(got {layer} of {len(params.weights)} layers)"
        )
    w = params.weights[layer]
    n_rows = w.shape[0]
    if n_rows < 2:
        raise ValueError("l1_filter_prune: layer needs at least 2 output units")
    n_remove = int(np.floor(ratio * n_rows))
    if n_remove >= n_rows:
        raise ValueError("l1_filter_prune: would prune every row")
    norms = np.abs(w).sum(axis=1)
    victims = np.lexsort((np.arange(n_rows), norms))[:n_remove]
    masks = [np.ones_like(m) for m in params.weights]
    masks[layer][victims, :] = 0.0
    masks[layer + 1][:, victims] = 0.0
    removed = [0] * len(params.weights)
    removed[layer] = int(n_remove * w.shape[1])
    removed[layer + 1] = int(n_remove * params.weights[layer + 1].shape[0])
    mask = SparseMask(masks)
    return PruneResult(mask, ratio, mask.sparsity(), "l1_filter", removed)


def knapsack_channel_prune(importances, costs, budget: int) -> list[int]:
    """Exact 0/1-knapsack channel selection.

    Maximizes total importance subject to sum(costs) <= budget via dynamic
    programming over capacities. Among optimal subsets, the walk prefers
    including lower-indexed channels (include channel i whenever inclusion
    still attains the optimum).
    """
    imp = np.asarray(importances, dtype=np.float64)
    cost = np.asarray(costs, dtype=np.int64)
    if imp.ndim != 1 or cost.ndim != 1 or imp.shape != cost.shape:
        raise DimensionError("knapsack_channel_prune: importances and costs must match")
    if (imp < 0).any():
        raise ValueError("knapsack_channel_prune: importances must be >= 0")
    if (cost <= 0).any():
        raise ValueError("knapsack_channel_prune: costs must be positive integers")
    if budget < 0:
        raise ValueError("knapsack_channel_prune: budget must be >= 0")
    n = imp.shape[0]
    if n == 0 or budget == 0:
        return []
    # best[i][c]: max importance using items i.. with capacity c
    best = np.zeros((n + 1, budget + 1))
    for i in range(n - 1, -1, -1):
        best[i] = best[i + 1]
        w = int(cost[i])
        if w <= budget:
            cand = imp[i] + best[i + 1][: budget + 1 - w]
            best[i][w:] = np.maximum(best[i + 1][w:], cand)
    selected = []
    c = budget
    for i in range(n):
        w = int(cost[i])
        if w <= c and imp[i] + best[i + 1][c - w] == best[i][c]:
            selected.append(i)
            c -= w
    return selected


def random_sparse_mask(
    spec: ModelSpec, ratio: float, rng: Rng, layer_balanced: bool = False
) -> SparseMask:
    """Exactly floor(ratio * |W|) zeros at uniform positions without replacement.

    With layer_balanced, each layer gets floor(ratio * |W_l|) zeros instead.
    """
    if not 0 <= ratio < 1:
        raise ValueError("random_sparse_mask: ratio must be in [0, 1)")
    shapes = [(out, inp) for inp, out in spec.layer_dims()]
    masks = [np.ones(s) for s in shapes]
    if layer_balanced:
        for m in masks:
            zeros = int(np.floor(ratio * m.size))
            hit = rng.permutation(m.size)[:zeros]
            m.ravel()[hit] = 0.0
    else:
        sizes = [m.size for m in masks]
        total = sum(sizes)
        zeros = int(np.floor(ratio * total))
        hit = rng.permutation(total)[:zeros]
        offsets = np.cumsum([0] + sizes)
        for flat in hit:
            li = int(np.searchsorted(offsets, flat, side="right")) - 1
            masks[li].ravel()[flat - offsets[li]] = 0.0
    return SparseMask(masks)


def _check_collapse(mask: SparseMask):
    for li, m in enumerate(mask.masks):
        if not m.any():
            raise MaskCollapseError(f"layer {li} is fully pruned")


def imp_lth(
    spec: ModelSpec,
    train_set: Dataset,
    eval_set: Dataset,
    cfg: TrainConfig,
    rounds: int,
    per_round_ratio: float,
) -> tuple[SparseMask, Params, list[list[RunRecord]]]:
    """Iterative magnitude pruning with rewinding to initialization.

    Each round trains under the current mask, prunes per_round_ratio of the
    surviving weights by global magnitude, and rewinds survivors to their
    initial values, so after r rounds density is (1 - per_round_ratio)^r up
    to floor rounding. Returns (final mask, rewound params, per-round
    records).
    """
    if rounds < 1:
        raise ValueError("imp_lth: rounds must be >= 1")
    if not 0 < per_round_ratio < 1:
        raise ValueError("imp_lth: per_round_ratio must be in (0, 1)")
    init0 = init_params(spec, Rng(spec.seed))
    mask = SparseMask([np.ones_like(w) for w in init0.weights])
    all_records: list[list[RunRecord]] = []
    for round_index in range(rounds):
        round_cfg = replace(cfg, mask=mask)
        trained, records = train(
            spec, train_set, eval_set, round_cfg, run_id=f"lth-round{round_index}"
        )
        all_records.append(records)
        survivors = sum(int(m.sum()) for m in mask.masks)
        n_remove = int(np.floor(per_round_ratio * survivors))
        order, locators = _flat_weight_order(trained.weights, mask.masks)
        masks = [m.copy() for m in mask.masks]
        for pos in order[:n_remove]:
            li, r, c = locators[pos]
            masks[li][r, c] = 0.0
        mask = SparseMask(masks)
        _check_collapse(mask)
    rewound = Params(
        [w * m for w, m in zip(init0.weights, mask.masks)],
        [b.copy() for b in init0.biases],
        list(init0.layer_stage),
    )
    return mask, rewound, all_records


def token_keep_probs(batch: TokenBatch) -> np.ndarray:
    """pi'_i = pi_i - sum_{j != i} CKA(X_i, X_j).

    The result can go negative; it is a ranking signal, not a probability.
    Raises DegenerateFeatureError naming the offending token when a token's
    features have zero variance.
    """
    if len(batch.tokens) < 2:
        raise DimensionError("token_keep_probs: needs at least 2 tokens")
    centered = []
    for i, tok in enumerate(batch.tokens):
        kc = _centered_gram(tok)
        if float((kc * kc).sum()) <= SELF_HSIC_FLOOR:
            raise DegenerateFeatureError(f"token {i} has zero variance")
        centered.append(kc)
    n = len(batch.tokens)
    adjusted = batch.base_keep_probs.copy()
    for i in range(n):
        for j in range(n):
            if j != i:
                adjusted[i] -= _cka_from_centered(
                    centered[i], centered[j], f"token {i}", f"token {j}"
                )
    return adjusted


def token_select(pi_prime, keep_ratio: float) -> list[int]:
    """Indices of the ceil(keep_ratio * N) tokens with largest pi', ties by
    lower index; returned sorted ascending."""
    if not 0 < keep_ratio <= 1:
        raise ValueError("token_select: keep_ratio must be in (0, 1]")
    pi = np.asarray(pi_prime, dtype=np.float64)
    n = pi.shape[0]
    keep = int(np.ceil(keep_ratio * n))
    order = np.lexsort((np.arange(n), -pi))
    return sorted(int(i) for i in order[:keep])


def epsilon_zeroing_deviation(
    params: Params,
    mask: SparseMask | None,
    spec: ModelSpec,
    probe: np.ndarray,
    epsilons,
) -> list[tuple[float, float]]:
    """Max |logit| deviation on a probe batch when weights |w| < eps are zeroed.

    The zero sets nest as eps grows, so the deviation is (empirically)
    monotone and vanishes as eps -> 0: small weights are removable without
    changing the function, which is what makes epsilon-sparsity a faithful
    stand-in for exact sparsity.
    """
    base_logits, _ = forward_capture(params, mask, probe, spec)
    out = []
    for eps in sorted(epsilons):
        clipped = Params(
            [np.where(np.abs(w) < eps, 0.0, w) for w in params.weights],
            [b.copy() for b in params.biases],
            list(params.layer_stage),
        )
        logits, _ = forward_capture(clipped, mask, probe, spec)
        out.append((float(eps), float(np.abs(logits - base_logits).max())))
    return out


def write_prune_json(path, result: PruneResult, config_hash: str) -> None:
    payload = result.to_dict()
    payload["config_hash"] = config_hash
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
