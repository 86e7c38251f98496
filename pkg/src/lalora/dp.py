"""Per-sample clipping, Gaussian privatization and the noise decomposition."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .numkit import SeededRng, ShapeError, gaussian_fill, matmul

__all__ = [
    "PrivacySpec",
    "clip",
    "clip_batch",
    "privatize",
    "privatize_batch",
    "privatize_layers",
    "median_clip_norm",
    "NoiseTerms",
    "noise_decomposition",
    "NoisyFactor",
    "alternating_perturbation",
]


@dataclass(frozen=True)
class PrivacySpec:
    """Clipping bound, noise multiplier and sampling for one client's DP-SGD.

    ``batch_fraction`` is the local data sampling rate b and
    ``local_dataset_size`` is R, so a mini-batch holds ``floor(b R)`` samples.
    ``sigma = 0`` is the non-private mode; the accountant refuses it.
    """

    clip_c: float
    sigma: float
    batch_fraction: float
    local_dataset_size: int
    delta: float = 1e-5
    epsilon_target: float | None = None

    def __post_init__(self):
        if not self.clip_c > 0:
            raise ValueError("clip_c must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch_fraction must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.batch_fraction * self.local_dataset_size < 1:
            raise ValueError("batch_fraction * local_dataset_size must be >= 1")

    @property
    def private(self) -> bool:
        return self.sigma > 0

    @property
    def batch_size(self) -> int:
        return int(math.floor(self.batch_fraction * self.local_dataset_size))

    @property
    def noise_std(self) -> float:
        """Std of the Gaussian added to the clipped mean, ``C sigma / (b R)``."""
        return self.clip_c * self.sigma / (self.batch_fraction * self.local_dataset_size)


def clip(g: np.ndarray, c: float) -> np.ndarray:
    """Scale ``g`` so its flattened l2 norm is at most ``c``."""
    if not c > 0:
        raise ValueError("clipping bound must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= c:
        return g
    return g / (norm / c)


def clip_batch(per_sample: np.ndarray, c: float) -> np.ndarray:
    """Clip a stacked ``(batch, ...)`` array sample by sample."""
    if not c > 0:
        raise ValueError("clipping bound must be positive")
    flat = per_sample.reshape(per_sample.shape[0], -1)
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    factor = np.maximum(1.0, norms / c)
    return per_sample / factor.reshape((-1,) + (1,) * (per_sample.ndim - 1))


def privatize_batch(per_sample: np.ndarray, spec: PrivacySpec, rng: SeededRng) -> np.ndarray:
    """Clipped mean over the realized batch plus ``C/(bR) N(0, sigma^2)`` noise.

    ``per_sample`` stacks the batch along axis 0. The mean divides by the
    realized batch size; the noise scale uses ``b R``.
    """
    if per_sample.shape[0] == 0:
        raise ValueError("empty batch")
    clipped = clip_batch(per_sample, spec.clip_c)
    total = np.zeros(per_sample.shape[1:])
    for g in clipped:  # fixed accumulation order
        total += g
    mean = total / per_sample.shape[0]
    if spec.sigma == 0:
        return mean
    return mean + gaussian_fill(mean.shape, rng, spec.noise_std)


def privatize(per_sample_grads: Sequence[np.ndarray], spec: PrivacySpec, rng: SeededRng) -> np.ndarray:
    if len(per_sample_grads) == 0:
        raise ValueError("need at least one per-sample gradient")
    shape = per_sample_grads[0].shape
    for g in per_sample_grads:
        if g.shape != shape:
            raise ShapeError(f"per-sample gradient shapes differ: {g.shape} vs {shape}")
    return privatize_batch(np.stack(per_sample_grads), spec, rng)


def privatize_layers(
    per_layer: Sequence[np.ndarray],
    clips: Sequence[float],
    spec: PrivacySpec,
    rng: SeededRng,
) -> list[np.ndarray]:
    """Privatize several stacked gradients, each with its own clipping bound.

    Every layer draws noise from its own child stream.
    """
    if len(per_layer) != len(clips):
        raise ValueError("one clipping bound per layer is required")
    out = []
    for idx, (grads, c) in enumerate(zip(per_layer, clips)):
        layer_spec = PrivacySpec(c, spec.sigma, spec.batch_fraction, spec.local_dataset_size, spec.delta)
        out.append(privatize_batch(grads, layer_spec, rng.child("layer", idx)))
    return out


def median_clip_norm(per_sample: np.ndarray) -> float:
    """Median per-sample gradient norm from a pilot run.

    Offline calibration only. Feeding data-dependent bounds back into
    training would invalidate the privacy accounting.
    """
    flat = per_sample.reshape(per_sample.shape[0], -1)
    return float(np.median(np.linalg.norm(flat, axis=1)))


class NoiseTerms(NamedTuple):
    linear_b_term: np.ndarray  # N_B A
    linear_a_term: np.ndarray  # B N_A
    cross_term: np.ndarray  # N_B N_A
    total: np.ndarray


def noise_decomposition(b, a, n_b, n_a) -> NoiseTerms:
    """Split ``(B + N_B)(A + N_A) - B A`` into its three perturbation terms."""
    if n_b.shape != b.shape or n_a.shape != a.shape:
        raise ShapeError("noise shapes must match the factors")
    lin_b = matmul(n_b, a)
    lin_a = matmul(b, n_a)
    cross = matmul(n_b, n_a)
    return NoiseTerms(lin_b, lin_a, cross, lin_b + lin_a + cross)


class NoisyFactor(enum.Enum):
    B = "b_noisy"
    A = "a_noisy"


def alternating_perturbation(which: NoisyFactor, b, a, noise) -> np.ndarray:
    """Perturbation of ``B A`` when only one factor carries noise.

    With A fixed this is ``N_B A``; with B fixed it is ``B N_A``. No
    product of two noise matrices can appear.
    """
    if which is NoisyFactor.B:
        if noise.shape != b.shape:
            raise ShapeError("noise must match B")
        return matmul(noise, a)
    if noise.shape != a.shape:
        raise ShapeError("noise must match A")
    return matmul(b, noise)
