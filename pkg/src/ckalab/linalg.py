"""Dense linear algebra with a fixed, reproducible summation order.

Matrices are plain 2-D float64 numpy arrays in C (row-major) layout.
Reductions accumulate left to right in row-major order and matrix products
accumulate over the inner dimension in ascending order, so results are
bit-identical to a naive triple loop and reruns reproduce exactly. BLAS
kernels (whose accumulation order is unspecified) are deliberately not used
here.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import DimensionError, NotPositiveDefiniteError

__all__ = [
    "Rng",
    "as_matrix",
    "seq_sum",
    "matmul",
    "frobenius_norm_sq",
    "gram",
    "centering_matrix",
    "center_gram",
    "cholesky_logdet",
    "random_orthogonal",
    "save_matrix_text",
    "load_matrix_text",
]

_U64 = (1 << 64) - 1


class Rng:
    """Deterministic random source backed by numpy's PCG64.

    PCG64 is a published counter-based generator whose stream depends only on
    the seed material, so identical seeds reproduce identical streams across
    platforms. Every stochastic operation in this package takes an Rng
    explicitly; nothing touches numpy's global state. ``key`` derives an
    independent stream from the same seed (e.g. one per epoch).
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        material = (self.seed & _U64,) + tuple(k & _U64 for k in self.key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(material)))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert user input to a finite 2-D float64 array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D array, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite entries")
    return arr


def seq_sum(a: np.ndarray) -> float:
    """Sum of all entries, accumulated left to right in row-major order.

    np.cumsum is a sequential accumulation, so the last element equals a
    plain Python loop over the flattened array, bit for bit.
    """
    flat = np.ascontiguousarray(a, dtype=np.float64).ravel()
    if flat.size == 0:
        return 0.0
    return float(np.cumsum(flat)[-1])


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with ascending-k accumulation.

    out[i, j] = sum_k a[i, k] * b[k, j], summed in ascending k, which makes
    the result bit-identical to a naive row-major triple loop.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul: operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.shape} x {b.shape}"
        )
    out = np.zeros((a.shape[0], b.shape[1]))
    tmp = np.empty_like(out)
    for k in range(a.shape[1]):
        np.multiply(a[:, k, None], b[k, :], out=tmp)
        out += tmp
    return out


def frobenius_norm_sq(a: np.ndarray) -> float:
    """Sum of squared entries (row-major accumulation); always >= 0."""
    arr = np.asarray(a, dtype=np.float64)
    return seq_sum(arr * arr)


def gram(x: np.ndarray) -> np.ndarray:
    """Gram matrix X X^T of pairwise example inner products."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    return matmul(x, np.ascontiguousarray(x.T))


@lru_cache(maxsize=32)
def centering_matrix(n: int) -> np.ndarray:
    """H = I - (1/n) * ones(n, n). Cached; the returned array is read-only."""
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    h.setflags(write=False)
    return h


def center_gram(k: np.ndarray) -> np.ndarray:
    """Doubly center a square Gram matrix: H K H with H = I - ones/n.

    The result has zero row and column sums (up to rounding). Centering a
    centered matrix is a no-op, and a constant matrix centers to zero.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"center_gram: expected a square matrix, got {k.shape}")
    n = k.shape[0]
    if n < 2:
        raise DimensionError("center_gram: centering needs at least 2 examples")
    h = centering_matrix(n)
    return matmul(matmul(h, k), h)


def cholesky_logdet(sigma: np.ndarray) -> float:
    """ln|Sigma| = 2 * sum(ln L_ii) for symmetric positive definite Sigma.

    Raises NotPositiveDefiniteError naming the failing pivot index when a
    pivot drops to or below 1e-12.
    """
    a = as_matrix(sigma, "cholesky_logdet")
    n, m = a.shape
    if n != m:
        raise DimensionError(f"cholesky_logdet: matrix must be square, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if float(np.abs(a - a.T).max()) > 1e-8 * scale:
        raise ValueError("cholesky_logdet: matrix is not symmetric")
    lower = np.zeros((n, n))
    logdet = 0.0
    for j in range(n):
        pivot = a[j, j] - float(np.dot(lower[j, :j], lower[j, :j]))
        if pivot <= 1e-12:
            raise NotPositiveDefiniteError(j, pivot)
        ljj = np.sqrt(pivot)
        lower[j, j] = ljj
        if j + 1 < n:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / ljj
        logdet += 2.0 * float(np.log(ljj))
    return logdet


def random_orthogonal(n: int, rng: Rng) -> np.ndarray:
    """Random orthogonal matrix via Gram-Schmidt on a Gaussian draw.

    Re-orthogonalizes once so Q^T Q = I holds to ~1e-14; regenerates on the
    (measure-zero) chance of rank deficiency, with bounded retries.
    """
    if n < 1:
        raise DimensionError("random_orthogonal: n must be >= 1")
    for _ in range(8):
        a = rng.standard_normal((n, n))
        q = np.zeros((n, n))
        ok = True
        for j in range(n):
            v = a[:, j].copy()
            for _pass in range(2):
                for i in range(j):
                    v -= np.dot(q[:, i], v) * q[:, i]
            norm = float(np.linalg.norm(v))
            if norm < 1e-12:
                ok = False
                break
            q[:, j] = v / norm
        if ok and float(np.abs(q.T @ q - np.eye(n)).max()) < 1e-10:
            return q
    raise RuntimeError("random_orthogonal: repeated rank deficiency")


def save_matrix_text(a: np.ndarray, path) -> None:
    """Write "rows cols" then one whitespace-separated row per line (%.17g)."""
    arr = as_matrix(a, "save_matrix_text")
    rows, cols = arr.shape
    with open(path, "w") as f:
        f.write(f"{rows} {cols}\n")
        for r in range(rows):
            f.write(" ".join("%.17g" % v for v in arr[r]) + "\n")


def load_matrix_text(path) -> np.ndarray:
    """Parse the text format written by save_matrix_text."""
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed header line")
        rows, cols = int(header[0]), int(header[1])
        data = np.zeros((rows, cols))
        for r in range(rows):
            parts = f.readline().split()
            if len(parts) != cols:
                raise ValueError(f"{path}: row {r} has {len(parts)} entries, expected {cols}")
            data[r] = [float(p) for p in parts]
    return as_matrix(data, str(path))
