"""Linear HSIC and linear CKA between feature maps.

Follows the Gram-matrix formulation: center K = X X^T and L = Y Y^T with
H = I - ones/n, then

    HSIC(X, Y) = sum_ij (H K H)_ij * (H L H)_ij
    CKA(X, Y)  = HSIC(X, Y) / sqrt(HSIC(X, X) * HSIC(Y, Y))

CKA is invariant to orthogonal transforms and isotropic scaling of either
argument, symmetric, and lies in [0, 1]. Feature maps with zero variance
after centering make CKA undefined; those raise DegenerateFeatureError so
the caller decides (the trainer skips the pair and logs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg as la
from .errors import DegenerateFeatureError, DimensionError

__all__ = [
    "FeatureMap",
    "CkaHeatmap",
    "linear_hsic",
    "linear_cka",
    "pairwise_cka",
    "mean_pairwise_cka",
    "SELF_HSIC_FLOOR",
]

SELF_HSIC_FLOOR = 1e-30


@dataclass
class FeatureMap:
    """Per-layer activations, one row per example.

    Inputs with more than 2 dims are flattened to (examples, -1) before any
    similarity computation. layer_index 0 denotes the input representation
    of its stage.
    """

    values: np.ndarray
    layer_index: int = 0
    stage_index: int = 1

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim > 2:
            arr = arr.reshape(arr.shape[0], -1)
        if arr.shape[0] < 2:
            raise DimensionError("FeatureMap: needs at least 2 examples")
        if not np.isfinite(arr).all():
            raise ValueError("FeatureMap: contains non-finite entries")
        if self.layer_index < 0:
            raise ValueError("FeatureMap: layer_index must be >= 0")
        if self.stage_index < 1:
            raise ValueError("FeatureMap: stage_index must be >= 1")
        self.values = arr

    @property
    def n_examples(self) -> int:
        return self.values.shape[0]


@dataclass
class CkaHeatmap:
    """Symmetric layer-by-layer CKA matrix with unit diagonal."""

    values: np.ndarray
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DimensionError(f"CkaHeatmap: expected square matrix, got {v.shape}")
        if float(np.abs(v - v.T).max()) > 1e-9:
            raise ValueError("CkaHeatmap: not symmetric within 1e-9")
        if float(np.abs(np.diag(v) - 1.0).max()) > 1e-9:
            raise ValueError("CkaHeatmap: diagonal must be 1")
        if v.min() < -1e-9 or v.max() > 1.0 + 1e-9:
            raise ValueError("CkaHeatmap: entries outside [0, 1] tolerance")
        self.values = v
        if not self.labels:
            self.labels = [f"layer_{i}" for i in range(v.shape[0])]

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def write_csv(self, path) -> None:
        """Header "layer_0,...,layer_N", then one %.6f row per layer."""
        with open(path, "w") as f:
            f.write(",".join(self.labels) + "\n")
            for row in self.values:
                f.write(",".join("%.6f" % v for v in row) + "\n")


def _centered_gram(values: np.ndarray) -> np.ndarray:
    return la.center_gram(la.gram(values))


def _check_examples(x: FeatureMap, y: FeatureMap):
    if x.n_examples != y.n_examples:
        raise DimensionError(
            f"example counts differ: {x.n_examples} vs {y.n_examples}"
        )


def linear_hsic(x: FeatureMap, y: FeatureMap) -> float:
    """Empirical linear-kernel HSIC via centered Gram matrices."""
    _check_examples(x, y)
    kc = _centered_gram(x.values)
    lc = _centered_gram(y.values)
    return la.seq_sum(kc * lc)


def _cka_from_centered(kc, lc, what_x: str, what_y: str) -> float:
    hxx = la.seq_sum(kc * kc)
    hyy = la.seq_sum(lc * lc)
    if hxx <= SELF_HSIC_FLOOR:
        raise DegenerateFeatureError(f"{what_x} has zero variance after centering")
    if hyy <= SELF_HSIC_FLOOR:
        raise DegenerateFeatureError(f"{what_y} has zero variance after centering")
    hxy = la.seq_sum(kc * lc)
    return hxy / np.sqrt(hxx * hyy)


def linear_cka(x: FeatureMap, y: FeatureMap) -> float:
    """Linear CKA in [0, 1]; 1 for identical maps up to the invariances."""
    _check_examples(x, y)
    return _cka_from_centered(
        _centered_gram(x.values),
        _centered_gram(y.values),
        "first argument",
        "second argument",
    )


def pairwise_cka(features: list[FeatureMap]) -> CkaHeatmap:
    """All-pairs CKA matrix; diagonal exactly 1, symmetric by construction."""
    if len(features) < 2:
        raise DimensionError("pairwise_cka: needs at least 2 feature maps")
    n = features[0].n_examples
    for fm in features[1:]:
        if fm.n_examples != n:
            raise DimensionError("pairwise_cka: example counts differ")
    centered = [_centered_gram(fm.values) for fm in features]
    size = len(features)
    out = np.eye(size)
    for i in range(size):
        for j in range(i + 1, size):
            try:
                c = _cka_from_centered(centered[i], centered[j], "x", "y")
            except DegenerateFeatureError as err:
                raise DegenerateFeatureError(
                    f"degenerate pair (stage {features[i].stage_index} layer "
                    f"{features[i].layer_index}) vs (stage {features[j].stage_index} "
                    f"layer {features[j].layer_index}): {err}"
                ) from None
            out[i, j] = c
            out[j, i] = c
    return CkaHeatmap(out)


def mean_pairwise_cka(features: list[FeatureMap]) -> float:
    """Mean CKA over unordered pairs, skipping degenerate ones.

    Returns 0.0 when every pair is degenerate (diagnostic metric; the strict
    contract lives in pairwise_cka).
    """
    if len(features) < 2:
        return 0.0
    centered = [_centered_gram(fm.values) for fm in features]
    total = 0.0
    count = 0
    for i in range(len(features)):
        for j in range(i + 1, len(features)):
            try:
                total += _cka_from_centered(centered[i], centered[j], "x", "y")
                count += 1
            except DegenerateFeatureError:
                continue
    return total / count if count else 0.0
