"""Information-theoretic and distributional diagnostics.

Gaussian mutual information is computed from empirical covariances as

    I(X; Y) = ln|Sigma_X| + ln|Sigma_Y| - ln|Sigma_(X,Y)|

which carries a factor-of-2 relative to the textbook convention; pass
halved=True for the 1/2-scaled value. Rank-based association results are
unaffected by the constant. The CKA <-> MI association check pairs this
estimator with linear CKA over a family of jointly Gaussian samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Rng, cholesky_logdet
from .model import Params
from .similarity import FeatureMap, linear_cka

__all__ = [
    "GaussianSample",
    "Histogram",
    "gaussian_mi",
    "spearman_rank_correlation",
    "cka_mi_association",
    "make_correlated_pair",
    "rho_grid_family",
    "weight_histogram",
    "write_histogram_csv",
    "COVARIANCE_RIDGE",
]

COVARIANCE_RIDGE = 1e-8


@dataclass
class GaussianSample:
    """Jointly sampled rows; n must exceed d_x + d_y so covariances are estimable."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if x.shape[0] != y.shape[0]:
            raise ValueError("GaussianSample: x and y need equal row counts")
        if x.shape[0] <= x.shape[1] + y.shape[1]:
            raise ValueError("GaussianSample: need n > d_x + d_y rows")
        self.x, self.y = x, y


@dataclass
class Histogram:
    """Uniform-bin histogram with explicit under/overflow counts."""

    bin_edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int

    @property
    def total(self) -> int:
        return self.underflow + self.overflow + int(self.counts.sum())


def _covariance(columns: np.ndarray) -> np.ndarray:
    """Empirical covariance with 1/(n-1) normalization, columns pre-centered."""
    centered = columns - columns.mean(axis=0)
    return (centered.T @ centered) / (columns.shape[0] - 1)


def gaussian_mi(sample: GaussianSample, halved: bool = False, clamp: bool = True) -> float:
    """Closed-form Gaussian MI from empirical covariances.

    A 1e-8 ridge is added to each covariance before the log-determinants.
    The estimate is clamped at 0 from below unless clamp=False (estimation
    noise can push the raw value slightly negative).
    """
    joint = np.hstack([sample.x, sample.y])
    dx = sample.x.shape[1]
    cov = _covariance(joint)
    ridge = COVARIANCE_RIDGE * np.eye(cov.shape[0])
    cov_r = cov + ridge
    mi = (
        cholesky_logdet(cov_r[:dx, :dx])
        + cholesky_logdet(cov_r[dx:, dx:])
        - cholesky_logdet(cov_r)
    )
    if halved:
        mi *= 0.5
    return max(0.0, mi) if clamp else mi


def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based), ties share the mean rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rank_correlation(a, b) -> float:
    """Spearman correlation: Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 2:
        raise ValueError("spearman: need two equal-length series of >= 2 values")
    ra, rb = _ranks(a), _ranks(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        raise ValueError("spearman: constant series has no rank correlation")
    return float((da * db).sum() / denom)


def cka_mi_association(pair_family: list[GaussianSample]) -> float:
    """Spearman correlation between per-pair linear CKA and Gaussian MI.

    Low CKA between jointly Gaussian representations should go with low
    mutual information; a strongly positive rank correlation over a family
    of varying cross-covariance strengths is the expected signature.
    """
    if len(pair_family) < 10:
        raise ValueError("cka_mi_association: need at least 10 pairs")
    ckas, mis = [], []
    for sample in pair_family:
        fx = FeatureMap(sample.x, layer_index=0, stage_index=1)
        fy = FeatureMap(sample.y, layer_index=1, stage_index=1)
        ckas.append(linear_cka(fx, fy))
        mis.append(gaussian_mi(sample))
    return spearman_rank_correlation(np.array(ckas), np.array(mis))


def make_correlated_pair(rho: float, n: int, rng: Rng) -> GaussianSample:
    """Scalar jointly Gaussian pair with correlation rho."""
    if not -1 < rho < 1:
        raise ValueError("make_correlated_pair: rho must lie in (-1, 1)")
    x = rng.standard_normal((n, 1))
    z = rng.standard_normal((n, 1))
    y = rho * x + np.sqrt(1.0 - rho * rho) * z
    return GaussianSample(x, y)


def rho_grid_family(rhos, n: int, rng: Rng) -> list[GaussianSample]:
    return [make_correlated_pair(r, n, rng) for r in rhos]


def weight_histogram(params: Params, bins: int = 101, bound: float = 0.5) -> Histogram:
    """Counts of all weight entries in uniform bins over [-bound, +bound].

    Entries below -bound land in the underflow bin, entries above +bound in
    the overflow bin (values exactly at the edges are in range). The default
    101 bins over [-0.5, 0.5] resolve the near-zero concentration that
    similarity-regularized training produces.
    """
    if bins < 2:
        raise ValueError("weight_histogram: bins must be >= 2")
    if bound <= 0:
        raise ValueError("weight_histogram: bound must be > 0")
    flat = np.concatenate([w.ravel() for w in params.weights])
    counts, edges = np.histogram(flat, bins=bins, range=(-bound, bound))
    return Histogram(
        bin_edges=edges,
        counts=counts,
        underflow=int((flat < -bound).sum()),
        overflow=int((flat > bound).sum()),
    )


def write_histogram_csv(hist: Histogram, path) -> None:
    """Rows of "bin_left,bin_right,count" plus under/overflow rows."""
    edges = [float(e) for e in hist.bin_edges]
    with open(path, "w") as f:
        f.write("bin_left,bin_right,count\n")
        f.write(f"-inf,{edges[0]!r},{hist.underflow}\n")
        for i, c in enumerate(hist.counts):
            f.write(f"{edges[i]!r},{edges[i + 1]!r},{int(c)}\n")
        f.write(f"{edges[-1]!r},inf,{hist.overflow}\n")
