"""Deterministic dense linear algebra and keyed randomness.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 with two
dimensions. Everything here is a pure function of its inputs, and the
canonical paths use a fixed summation order so reruns are bit-identical.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg

__all__ = [
    "ShapeError",
    "NotSPD",
    "as_matrix",
    "matmul",
    "solve_spd",
    "PowerResult",
    "power_iteration",
    "conv1d_symmetric",
    "conv1d_rows",
    "SeededRng",
    "gaussian_fill",
]


class ShapeError(ValueError):
    """Operand dimensions are inconsistent."""


class NotSPD(np.linalg.LinAlgError):
    """A Gram matrix failed the Cholesky conditioning floor."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate external input as a finite 2-D float64 array."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation order.

    Entry ``(i, j)`` is ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``, exactly
    what a naive triple loop produces. BLAS is avoided on purpose: its
    blocking and threading change the rounding from run to run.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def solve_spd(g: np.ndarray, rhs: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve ``g @ x = rhs`` for symmetric positive definite ``g``.

    Raises NotSPD when a Cholesky pivot falls below ``1e-12`` times the
    largest diagonal entry. ``ridge`` is added to the diagonal first and is
    zero unless a caller opts in.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError(f"Gram matrix must be square, got {g.shape}")
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != g.shape[0]:
        raise ShapeError(f"rhs has {rhs.shape[0]} rows, expected {g.shape[0]}")
    scale = np.max(np.abs(g)) if g.size else 0.0
    if np.max(np.abs(g - g.T), initial=0.0) > 1e-12 * scale:
        raise NotSPD("matrix is not symmetric")
    if ridge:
        g = g + ridge * np.eye(g.shape[0])
    dmax = np.max(np.diag(g), initial=0.0)
    if not dmax > 0.0:
        raise NotSPD("non-positive diagonal")
    try:
        chol = scipy.linalg.cholesky(g, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotSPD(str(exc)) from None
    pivots = np.diag(chol) ** 2
    if np.min(pivots) <= 1e-12 * dmax:
        raise NotSPD(f"pivot {np.min(pivots):.3e} below floor {1e-12 * dmax:.3e}")
    return scipy.linalg.cho_solve((chol, True), rhs, check_finite=False)


class PowerResult(NamedTuple):
    value: float
    converged: bool
    iterations: int


def power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    iters: int = 1000,
    tol: float = 1e-10,
    v0: np.ndarray | None = None,
) -> PowerResult:
    """Dominant eigenvalue of a symmetric operator via Rayleigh quotients.

    Stops once two successive quotients differ by less than ``tol``.
    Non-convergence is reported in the result rather than raised.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if v0 is None:
        v0 = SeededRng(0, ("power_iteration", dim)).normal(dim)
    v = np.asarray(v0, dtype=np.float64).ravel()
    v = v / np.linalg.norm(v)
    prev = None
    for it in range(1, iters + 1):
        w = np.asarray(apply(v), dtype=np.float64).ravel()
        lam = float(np.dot(v, w))
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return PowerResult(0.0, True, it)
        if prev is not None and abs(lam - prev) < tol:
            return PowerResult(lam, True, it)
        prev = lam
        v = w / norm
    return PowerResult(prev if prev is not None else 0.0, False, iters)


def _check_kernel(kernel: np.ndarray) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64).ravel()
    if kernel.size % 2 != 1:
        raise ValueError(f"kernel length must be odd, got {kernel.size}")
    return kernel


def conv1d_rows(x: np.ndarray, kernel: np.ndarray, mode: str = "symmetric") -> np.ndarray:
    """Convolve every row of ``x`` with ``kernel``; output keeps the row length.

    ``mode`` is a ``numpy.pad`` mode. The default ``"symmetric"`` mirrors
    the signal including its edge sample (``[x1, x0 | x0, x1, ...]``).
    """
    kernel = _check_kernel(kernel)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("conv1d_rows expects a 2-D array")
    n = x.shape[1]
    if n == 0:
        raise ValueError("empty signal")
    half = kernel.size // 2
    padded = np.pad(x, ((0, 0), (half, half)), mode=mode)
    # accumulate tap * (neighbour - centre) on top of the centre value; for a
    # kernel summing to 1 this is the same convolution, and constants stay exact
    if abs(float(kernel.sum()) - 1.0) <= 1e-12:
        out = x.copy()
        for j, tap in enumerate(kernel):
            start = 2 * half - j
            if start != half:
                out += tap * (padded[:, start:start + n] - x)
        return out
    out = np.zeros_like(x)
    for j, tap in enumerate(kernel):
        start = 2 * half - j
        out += tap * padded[:, start:start + n]
    return out


def conv1d_symmetric(signal, kernel, mode: str = "symmetric") -> np.ndarray:
    """Same-length 1-D convolution with symmetric boundary padding."""
    signal = np.asarray(signal, dtype=np.float64).ravel()
    if signal.size == 0:
        raise ValueError("empty signal")
    return conv1d_rows(signal[None, :], kernel, mode=mode)[0]


def _key_word(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("rng key integers must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


@dataclass(frozen=True)
class SeededRng:
    """Counter-based random stream addressed by ``(seed, key)``.

    The same seed and key always give the same draws, and any stream can
    be regenerated on its own, e.g. one client's noise at one local step.
    Uniforms come from Philox; normals use Box-Muller on those uniforms.
    """

    seed: int
    key: tuple = ()
    algorithm: str = "philox-boxmuller"

    def child(self, *parts) -> "SeededRng":
        return replace(self, key=self.key + tuple(parts))

    def generator(self) -> np.random.Generator:
        if self.algorithm != "philox-boxmuller":
            raise ValueError(f"unknown rng algorithm {self.algorithm!r}")
        words = [_key_word(p) for p in self.key]
        ss = np.random.SeedSequence(int(self.seed), spawn_key=words)
        return np.random.Generator(np.random.Philox(ss))

    def uniform(self, n: int) -> np.ndarray:
        return self.generator().random(n)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.generator().random(2 * pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u[:pairs]))  # 1 - u lies in (0, 1]
        angle = 2.0 * math.pi * u[pairs:]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n]


def gaussian_fill(shape, rng: SeededRng, std: float) -> np.ndarray:
    """Matrix of i.i.d. N(0, std**2) entries drawn from ``rng``'s stream."""
    if std < 0:
        raise ValueError("std must be non-negative")
    rows, cols = shape
    if std == 0:
        return np.zeros((rows, cols))
    return std * rng.normal(rows * cols).reshape(rows, cols)
