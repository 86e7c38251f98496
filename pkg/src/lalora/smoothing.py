"""Low-pass filtering of noisy factor gradients.

A-gradients (r x n) are filtered along each row (input features),
B-gradients (m x r) along each column (output features). The r low-rank
components are never mixed. Filtering happens after the noise is added,
so it is privacy-neutral post-processing.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb

import numpy as np

from .numkit import conv1d_rows

__all__ = [
    "SmoothingKernel",
    "binomial_kernel",
    "gaussian_kernel",
    "kernel_from_config",
    "smooth_grad_a",
    "smooth_grad_b",
]


@dataclass(frozen=True)
class SmoothingKernel:
    taps: tuple
    origin: str
    params: tuple = ()

    def __post_init__(self):
        taps = self.taps
        if len(taps) % 2 != 1:
            raise ValueError("kernel length must be odd")
        if any(abs(t - u) > 0 for t, u in zip(taps, reversed(taps))):
            raise ValueError("kernel must be symmetric")
        if abs(sum(taps) - 1.0) > 1e-15:
            raise ValueError("kernel taps must sum to 1")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.taps, dtype=np.float64)

    @property
    def energy(self) -> float:
        """Sum of squared taps: variance gain on white noise away from edges."""
        return float(np.sum(self.array**2))


def binomial_kernel(width: int) -> SmoothingKernel:
    """Normalized binomial taps, e.g. width 5 gives ``[1, 4, 6, 4, 1] / 16``."""
    if width not in (3, 5, 7):
        raise ValueError(f"unsupported binomial width {width}; choose 3, 5 or 7")
    n = width - 1
    taps = tuple(float(Fraction(comb(n, i), 2**n)) for i in range(width))
    return SmoothingKernel(taps, "binomial", (width,))


def gaussian_kernel(sigma_s: float, radius: int = 2) -> SmoothingKernel:
    """Sampled Gaussian ``exp(-i^2 / (2 sigma_s^2))`` on ``[-radius, radius]``, renormalized.

    ``sigma_s`` is measured in tap units. Tiny values give a unit impulse.
    """
    if not sigma_s > 0:
        raise ValueError("sigma_s must be positive")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(i**2) / (2.0 * sigma_s**2))
    w = w / w.sum()
    w = 0.5 * (w + w[::-1])  # exact symmetry after rounding
    w[radius] = 1.0 - (w[:radius].sum() + w[radius + 1:].sum())
    return SmoothingKernel(tuple(float(x) for x in w), "gaussian", (sigma_s, radius))


def kernel_from_config(kind: str, sigma_s: float = 1.0, radius: int = 2) -> SmoothingKernel | None:
    """Map ``filter.kind`` to a kernel; ``"none"`` disables filtering."""
    if kind == "none":
        return None
    if kind in ("binomial3", "binomial5", "binomial7"):
        return binomial_kernel(int(kind[-1]))
    if kind == "gaussian":
        return gaussian_kernel(sigma_s, radius)
    raise ValueError(f"unknown filter kind {kind!r}")


def smooth_grad_a(grad_a: np.ndarray, kernel: SmoothingKernel, mode: str = "symmetric") -> np.ndarray:
    return conv1d_rows(grad_a, kernel.array, mode=mode)


def smooth_grad_b(grad_b: np.ndarray, kernel: SmoothingKernel, mode: str = "symmetric") -> np.ndarray:
    return conv1d_rows(grad_b.T, kernel.array, mode=mode).T
