"""Masked feed-forward networks and the seeded SGD trainer.

The backbone is an MLP whose hidden layers are grouped into stages; the
regularizer consumes per-stage captures (layer 0 of each stage is the stage
input, then one post-activation map per layer). A final un-activated linear
layer produces logits and is not captured.

Training is plain SGD with momentum on L = L_E + L_C, where L_E is the
cross-entropy over the full batch and L_C is the similarity regularizer on a
few-shot forward pass of the leading batch rows (per the sample/batch
policy). Masked weights are re-zeroed after every step, so mask sparsity is
preserved exactly. Identical configs (including seeds) reproduce runs
bit for bit.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import linalg as la
from .cka_sr import CkaSrConfig, StageCapture, aug_cka_sr_term, cka_sr_term, should_apply, subsample
from .data import Dataset, BatchIterator
from .errors import DegenerateFeatureError, DimensionError
from .linalg import Rng
from .similarity import FeatureMap, mean_pairwise_cka

__all__ = [
    "ModelSpec",
    "Params",
    "SparseMask",
    "TrainConfig",
    "RunRecord",
    "TrainingDivergedError",
    "init_params",
    "forward_capture",
    "unique_feature_maps",
    "cross_entropy",
    "weight_fraction_below",
    "train",
    "evaluate_accuracy",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

PROBE_MIN_ROWS = 128


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ModelSpec:
    """Stage-grouped MLP: stages is a list of per-stage layer widths."""

    stages: list[list[int]]
    input_dim: int
    num_classes: int
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if not self.stages or any(not s for s in self.stages):
            raise ValueError("ModelSpec: need at least one stage with one layer")
        if any(w < 1 for s in self.stages for w in s):
            raise ValueError("ModelSpec: layer widths must be >= 1")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("ModelSpec: input_dim >= 1 and num_classes >= 2 required")
        if self.activation != "relu":
            raise ValueError(f"ModelSpec: unsupported activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(in, out) per layer, hidden layers first, classifier last."""
        dims = []
        prev = self.input_dim
        for stage in self.stages:
            for width in stage:
                dims.append((prev, width))
                prev = width
        dims.append((prev, self.num_classes))
        return dims

    def layer_stages(self) -> list[int]:
        """1-based stage index per layer; the classifier joins the last stage."""
        out = []
        for s, stage in enumerate(self.stages, start=1):
            out.extend([s] * len(stage))
        out.append(len(self.stages))
        return out

    @property
    def num_hidden(self) -> int:
        return sum(len(s) for s in self.stages)


@dataclass
class Params:
    """Per-layer weight matrices (out x in) and bias vectors (out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    layer_stage: list[int]

    def copy(self) -> "Params":
        return Params(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.layer_stage),
        )

    def total_weight_count(self) -> int:
        return sum(w.size for w in self.weights)


@dataclass
class SparseMask:
    """Binary masks congruent to the weight matrices; biases never masked."""

    masks: list[np.ndarray]

    def __post_init__(self):
        clean = []
        for m in self.masks:
            arr = np.ascontiguousarray(m, dtype=np.float64)
            if not np.isin(arr, (0.0, 1.0)).all():
                raise ValueError("SparseMask: entries must be 0 or 1")
            clean.append(arr)
        self.masks = clean

    def sparsity(self) -> float:
        total = sum(m.size for m in self.masks)
        zeros = sum(int((m == 0).sum()) for m in self.masks)
        return zeros / total

    def check_congruent(self, params: Params):
        if len(self.masks) != len(params.weights):
            raise DimensionError("SparseMask: layer count differs from params")
        for i, (m, w) in enumerate(zip(self.masks, params.weights)):
            if m.shape != w.shape:
                raise DimensionError(
                    f"SparseMask: layer {i} mask {m.shape} vs weight {w.shape}"
                )


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    cka_sr: CkaSrConfig = field(default_factory=CkaSrConfig)
    mask: SparseMask | None = None
    epsilons: tuple[float, ...] = (1e-4, 1e-3, 1e-2)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("TrainConfig: epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("TrainConfig: learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("TrainConfig: momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("TrainConfig: batch_size must be >= 1")
        if any(e <= 0 for e in self.epsilons):
            raise ValueError("TrainConfig: epsilons must be > 0")


@dataclass
class RunRecord:
    """Per-epoch metrics of one training run."""

    run_id: str
    epoch: int
    train_loss: float
    cka_loss: float
    eval_accuracy: float
    mean_pairwise_cka: float
    epsilon_sparsity: dict[float, float]
    wall_time: float
    cka_applied: int = 0


def init_params(spec: ModelSpec, rng: Rng) -> Params:
    """Kaiming-style fan-in uniform init: |w| <= sqrt(6 / fan_in), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims():
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Params(weights, biases, spec.layer_stages())


def _effective_weights(params: Params, mask: SparseMask | None) -> list[np.ndarray]:
    if mask is None:
        return params.weights
    mask.check_congruent(params)
    return [w * m for w, m in zip(params.weights, mask.masks)]


def forward_capture(
    params: Params, mask: SparseMask | None, x: np.ndarray, spec: ModelSpec
) -> tuple[np.ndarray, list[StageCapture]]:
    """Forward pass with per-layer feature capture.

    Returns un-activated logits plus one StageCapture per stage, each holding
    the stage input (layer 0) and every post-activation output.
    """
    x = la.as_matrix(x, "input batch")
    if x.shape[1] != spec.input_dim:
        raise DimensionError(
            f"forward_capture: input has {x.shape[1]} dims, spec wants {spec.input_dim}"
        )
    weights = _effective_weights(params, mask)
    captures: list[StageCapture] = []
    h = x
    layer = 0
    for s, stage in enumerate(spec.stages, start=1):
        maps = [FeatureMap(h, layer_index=0, stage_index=s)]
        for pos in range(1, len(stage) + 1):
            z = la.matmul(h, np.ascontiguousarray(weights[layer].T)) + params.biases[layer]
            h = np.maximum(z, 0.0)
            maps.append(FeatureMap(h, layer_index=pos, stage_index=s))
            layer += 1
        captures.append(StageCapture(s, maps))
    logits = la.matmul(h, np.ascontiguousarray(weights[-1].T)) + params.biases[-1]
    return logits, captures


def unique_feature_maps(captures: list[StageCapture]) -> list[FeatureMap]:
    """Network input plus every layer output, without cross-stage duplicates."""
    maps = [captures[0].features[0]]
    for sc in captures:
        maps.extend(sc.features[1:])
    return maps


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log softmax probability of the true class."""
    logits = la.as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or (labels >= logits.shape[1]).any():
        raise ValueError("cross_entropy: label out of range")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    picked = logits[np.arange(logits.shape[0]), labels]
    return -la.seq_sum(picked - lse) / logits.shape[0]


def evaluate_accuracy(
    params: Params, mask: SparseMask | None, dataset: Dataset, spec: ModelSpec
) -> float:
    logits, _ = forward_capture(params, mask, dataset.features, spec)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def weight_fraction_below(params: Params, epsilon: float) -> float:
    """Fraction of weight-matrix entries with |w| < epsilon (strict); biases excluded."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    small = sum(int((np.abs(w) < epsilon).sum()) for w in params.weights)
    return small / params.total_weight_count()


def _forward_tape(tape, w_vars, b_vars, x: np.ndarray, spec: ModelSpec,
                  mask: SparseMask | None):
    """Tape-recorded forward pass; returns (logits Var, per-stage capture Vars).

    Bias broadcast is expressed as ones(n,1) @ b(1,out) so every operation
    stays within the supported op set. Captures are (layer_index, Var) pairs
    per stage, layer 0 being the stage input.
    """
    n = x.shape[0]
    ones = tape.leaf(np.ones((n, 1)))
    h = tape.leaf(x)
    stage_captures = []
    layer = 0
    for stage in spec.stages:
        maps = [(0, h)]
        for pos in range(1, len(stage) + 1):
            w = w_vars[layer]
            if mask is not None:
                w = ad.mul(w, tape.leaf(mask.masks[layer]))
            z = ad.add(ad.matmul(h, ad.transpose(w)), ad.matmul(ones, b_vars[layer]))
            h = ad.relu(z)
            maps.append((pos, h))
            layer += 1
        stage_captures.append(maps)
    w = w_vars[-1]
    if mask is not None:
        w = ad.mul(w, tape.leaf(mask.masks[-1]))
    logits = ad.add(ad.matmul(h, ad.transpose(w)), ad.matmul(ones, b_vars[-1]))
    return logits, stage_captures


def _cross_entropy_var(tape, logits, labels: np.ndarray):
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.mul(ad.log_softmax(logits), tape.leaf(onehot))
    return ad.smul(ad.sum_all(picked), -1.0 / n)


def train(
    spec: ModelSpec,
    train_set: Dataset,
    eval_set: Dataset,
    cfg: TrainConfig,
    run_id: str = "",
    on_batch=None,
    on_epoch=None,
    initial_params: Params | None = None,
) -> tuple[Params, list[RunRecord]]:
    """SGD with momentum on L = L_E + L_C.

    The regularizer fires on batches whose global step index satisfies the
    batch_m policy, computed on a few-shot forward pass over the leading
    sample_n rows. Masked weights are re-zeroed after every step. Weight
    decay skips biases. ``on_batch(epoch, step, applied, loss_e, loss_c)``
    and ``on_epoch(epoch, params)`` are optional observation hooks;
    ``initial_params`` warm-starts from existing weights (e.g. finetuning a
    pruned checkpoint) instead of the seeded init.
    """
    if len(train_set) == 0:
        raise ValueError("train: empty training set")
    if train_set.features.shape[1] != spec.input_dim:
        raise DimensionError("train: dataset dimension does not match the model spec")
    run_id = run_id or f"seed{cfg.seed}"
    cka_cfg = cfg.cka_sr
    use_cka = cka_cfg.beta > 0.0

    params = initial_params.copy() if initial_params is not None else init_params(spec, Rng(spec.seed))
    if cfg.mask is not None:
        cfg.mask.check_congruent(params)
        for w, m in zip(params.weights, cfg.mask.masks):
            w *= m
    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]

    # metric probe: leading rows of the (unshuffled) evaluation split, fixed
    # per run; at least 128 rows because CKA estimates on tiny probes are too
    # noisy to compare runs
    probe = eval_set.features[: min(len(eval_set), max(cfg.batch_size, PROBE_MIN_ROWS))]
    records: list[RunRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        loss_sum = 0.0
        cka_sum = 0.0
        applied_count = 0
        batch_count = 0
        for batch_index, (xb, yb) in enumerate(
            BatchIterator(train_set, cfg.batch_size, cfg.seed, epoch)
        ):
            tape = ad.Tape()
            w_vars = [tape.leaf(w) for w in params.weights]
            b_vars = [tape.leaf(b.reshape(1, -1)) for b in params.biases]
            logits, _ = _forward_tape(tape, w_vars, b_vars, xb, spec, cfg.mask)
            loss = _cross_entropy_var(tape, logits, yb)
            ce_value = float(loss.value[0, 0])

            applied = False
            lc_value = 0.0
            if use_cka and should_apply(step, cka_cfg) and xb.shape[0] >= 2:
                xs = subsample(xb, cka_cfg)
                _, capture_vars = _forward_tape(tape, w_vars, b_vars, xs, spec, cfg.mask)
                try:
                    if cka_cfg.variant == "standard":
                        term, _ = cka_sr_term(tape, capture_vars, cka_cfg)
                    else:
                        flat = [capture_vars[0][0][1]] + [
                            v for maps in capture_vars for _, v in maps[1:]
                        ]
                        term, _ = aug_cka_sr_term(tape, flat, cka_cfg.beta)
                except DegenerateFeatureError as err:
                    log.warning(
                        "epoch %d batch %d: regularizer skipped (%s)", epoch, batch_index, err
                    )
                    term = None
                if term is not None:
                    lc_value = float(term.value[0, 0])
                    loss = ad.add(loss, term)
                    applied = True

            loss_value = float(loss.value[0, 0])
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}"
                )
            grads = ad.backward(tape, loss)

            for i, w in enumerate(params.weights):
                g = grads[w_vars[i].index] + cfg.weight_decay * w
                vel_w[i] = cfg.momentum * vel_w[i] + g
                w -= cfg.learning_rate * vel_w[i]
                if cfg.mask is not None:
                    w *= cfg.mask.masks[i]
            for i, b in enumerate(params.biases):
                g = grads[b_vars[i].index].reshape(-1)
                vel_b[i] = cfg.momentum * vel_b[i] + g
                b -= cfg.learning_rate * vel_b[i]

            if on_batch is not None:
                on_batch(epoch, step, applied, ce_value, lc_value)
            loss_sum += loss_value
            if applied:
                cka_sum += lc_value
                applied_count += 1
            batch_count += 1
            step += 1

        _, probe_captures = forward_capture(params, cfg.mask, probe, spec)
        records.append(
            RunRecord(
                run_id=run_id,
                epoch=epoch,
                train_loss=loss_sum / batch_count,
                cka_loss=cka_sum / applied_count if applied_count else 0.0,
                eval_accuracy=evaluate_accuracy(params, cfg.mask, eval_set, spec),
                mean_pairwise_cka=mean_pairwise_cka(unique_feature_maps(probe_captures)),
                epsilon_sparsity={
                    e: weight_fraction_below(params, e) for e in cfg.epsilons
                },
                wall_time=time.perf_counter() - t0,
                cka_applied=applied_count,
            )
        )
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, records


def plain_config(cfg: TrainConfig) -> TrainConfig:
    """The same config with the regularizer path turned off."""
    return replace(cfg, cka_sr=replace(cfg.cka_sr, beta=0.0))


def save_checkpoint(path, spec: ModelSpec, params: Params,
                    mask: SparseMask | None, config_hash: str) -> None:
    """JSON checkpoint with full float round-trip fidelity."""
    payload = {
        "model": {
            "stages": spec.stages,
            "input_dim": spec.input_dim,
            "num_classes": spec.num_classes,
            "activation": spec.activation,
            "seed": spec.seed,
        },
        "params": {
            "weights": [w.tolist() for w in params.weights],
            "biases": [b.tolist() for b in params.biases],
            "layer_stage": params.layer_stage,
        },
        "mask": None if mask is None else [m.tolist() for m in mask.masks],
        "config_hash": config_hash,
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path) -> tuple[ModelSpec, Params, SparseMask | None, str]:
    with open(path) as f:
        payload = json.load(f)
    m = payload["model"]
    spec = ModelSpec(
        stages=[list(s) for s in m["stages"]],
        input_dim=m["input_dim"],
        num_classes=m["num_classes"],
        activation=m["activation"],
        seed=m["seed"],
    )
    p = payload["params"]
    params = Params(
        [np.array(w, dtype=np.float64) for w in p["weights"]],
        [np.array(b, dtype=np.float64) for b in p["biases"]],
        list(p["layer_stage"]),
    )
    mask = None
    if payload["mask"] is not None:
        mask = SparseMask([np.array(m, dtype=np.float64) for m in payload["mask"]])
    return spec, params, mask, payload["config_hash"]
