"""Empirical instruments: gradient alignment, sharpness and noise scaling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numkit import PowerResult, SeededRng, ShapeError, gaussian_fill, matmul, power_iteration

__all__ = [
    "grad_cosine",
    "induced_cosine",
    "CosineTrace",
    "hessian_max_eig",
    "SweepRow",
    "perturbation_sweep",
    "loglog_slope",
]


def grad_cosine(g1: np.ndarray, g2: np.ndarray) -> float:
    """Cosine between two same-shape gradients, flattened.

    One zero argument gives 0 with a warning; two zeros raise.
    """
    if g1.shape != g2.shape:
        raise ShapeError(f"raw cosine needs equal shapes, got {g1.shape} and {g2.shape}")
    n1 = float(np.linalg.norm(g1))
    n2 = float(np.linalg.norm(g2))
    if n1 == 0.0 and n2 == 0.0:
        raise ValueError("both gradients are zero")
    if n1 == 0.0 or n2 == 0.0:
        warnings.warn("cosine with a zero gradient defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    c = float(np.dot(g1.ravel(), g2.ravel())) / (n1 * n2)
    return min(1.0, max(-1.0, c))


def induced_cosine(grad_a: np.ndarray, grad_b: np.ndarray, a: np.ndarray, b: np.ndarray, s: float) -> float:
    """Cosine between the weight-space moves the two factor gradients induce.

    A step along ``grad_a`` moves W along ``s B grad_a``; a step along
    ``grad_b`` moves it along ``s grad_b A``. Both are m x n, so their
    cosine is defined even though the factor gradients differ in shape.
    """
    return grad_cosine(s * matmul(b, grad_a), s * matmul(grad_b, a))


@dataclass
class CosineTrace:
    values: list = field(default_factory=list)

    def record(self, value: float) -> None:
        if not -1.0 <= value <= 1.0:
            raise ValueError("cosine outside [-1, 1]")
        self.values.append(float(value))

    @property
    def late_window_mean(self) -> float:
        """Mean over the last 10% of recorded steps (needs at least 10)."""
        if len(self.values) < 10:
            raise ValueError("late-window mean needs at least 10 recorded steps")
        n = max(1, len(self.values) // 10)
        return float(np.mean(self.values[-n:]))


def hessian_max_eig(
    grad: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    iters: int = 200,
    tol: float = 1e-8,
) -> PowerResult:
    """Largest Hessian eigenvalue by power iteration on finite-difference HVPs.

    ``Hv ~ (grad(theta + h v) - grad(theta - h v)) / (2h)`` with
    ``h = sqrt(eps) * (1 + ||theta||)``.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    h = math.sqrt(np.finfo(np.float64).eps) * (1.0 + float(np.linalg.norm(theta)))

    def hvp(v):
        return (grad(theta + h * v) - grad(theta - h * v)) / (2.0 * h)

    return power_iteration(hvp, theta.size, iters=iters, tol=tol)


@dataclass(frozen=True)
class SweepRow:
    sigma: float
    cross: float  # E||N_B N_A||_F
    linear: float  # E||B N_A + N_B A||_F
    lora_total: float  # E||B N_A + N_B A + N_B N_A||_F
    full: float  # E||N_W||_F


def perturbation_sweep(b: np.ndarray, a: np.ndarray, sigmas: Sequence[float], draws: int, rng: SeededRng) -> list[SweepRow]:
    """Monte Carlo Frobenius norms of the LoRA noise terms against full-weight noise.

    Each (sigma, draw) pair has its own noise stream.
    """
    if draws < 30:
        raise ValueError("use at least 30 draws")
    m, r = b.shape
    n = a.shape[1]
    rows = []
    for si, sigma in enumerate(sigmas):
        acc = np.zeros(4)
        for d in range(draws):
            key = rng.child("sweep", si, d)
            n_b = gaussian_fill((m, r), key.child("nb"), sigma)
            n_a = gaussian_fill((r, n), key.child("na"), sigma)
            n_w = gaussian_fill((m, n), key.child("nw"), sigma)
            lin = matmul(b, n_a) + matmul(n_b, a)
            cross = matmul(n_b, n_a)
            acc += [np.linalg.norm(cross), np.linalg.norm(lin), np.linalg.norm(lin + cross), np.linalg.norm(n_w)]
        acc /= draws
        rows.append(SweepRow(float(sigma), *map(float, acc)))
    return rows


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])
