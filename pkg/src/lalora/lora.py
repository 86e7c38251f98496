"""LoRA reparameterization, factor gradients and projected (scaled) gradients."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .numkit import NotSPD, SeededRng, ShapeError, gaussian_fill, matmul, solve_spd

__all__ = [
    "RankDeficient",
    "LoraAdapter",
    "init_adapter",
    "effective_weight",
    "factor_grads",
    "projected_grad_b",
    "projected_grad_a",
    "row_projector",
    "col_projector",
    "Factor",
    "Phase",
    "AlternationSchedule",
    "phase_for_step",
    "UpdateForms",
    "full_weight_update_forms",
]


class RankDeficient(NotSPD):
    """A LoRA factor lost full rank, so its Gram matrix cannot be inverted."""


@dataclass(frozen=True)
class LoraAdapter:
    """Frozen ``w0`` (m x n) plus trainable ``b`` (m x r) and ``a`` (r x n)."""

    w0: np.ndarray
    a: np.ndarray
    b: np.ndarray
    alpha: float

    def __post_init__(self):
        m, n = self.w0.shape
        r = self.a.shape[0]
        if self.a.shape != (r, n) or self.b.shape != (m, r):
            raise ShapeError(
                f"factor shapes b{self.b.shape}, a{self.a.shape} do not fit w0{self.w0.shape}"
            )
        if r > min(m, n):
            raise ShapeError(f"rank {r} exceeds min({m}, {n})")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def s(self) -> float:
        return self.alpha / self.rank

    def with_factors(self, a=None, b=None) -> "LoraAdapter":
        return replace(self, a=self.a if a is None else a, b=self.b if b is None else b)


def init_adapter(w0: np.ndarray, rank: int, alpha: float, rng: SeededRng) -> LoraAdapter:
    """Standard LoRA start: ``b = 0`` and ``a`` i.i.d. N(0, 1/rank)."""
    m, n = w0.shape
    a = gaussian_fill((rank, n), rng, 1.0 / np.sqrt(rank))
    return LoraAdapter(w0=w0, a=a, b=np.zeros((m, rank)), alpha=alpha)


def effective_weight(adapter: LoraAdapter) -> np.ndarray:
    return adapter.w0 + adapter.s * matmul(adapter.b, adapter.a)


def factor_grads(grad_w: np.ndarray, adapter: LoraAdapter) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule through ``W = W0 + s B A``: returns ``(grad_a, grad_b)``."""
    if grad_w.shape != adapter.w0.shape:
        raise ShapeError(f"grad_w {grad_w.shape} does not match w0 {adapter.w0.shape}")
    s = adapter.s
    grad_a = s * matmul(adapter.b.T, grad_w)
    grad_b = s * matmul(grad_w, adapter.a.T)
    return grad_a, grad_b


def _ridge(gram: np.ndarray, ridge: bool) -> float:
    return 1e-10 * np.trace(gram) / gram.shape[0] if ridge else 0.0


def _gram_solve(gram: np.ndarray, rhs: np.ndarray, ridge: bool, what: str) -> np.ndarray:
    try:
        return solve_spd(gram, rhs, ridge=_ridge(gram, ridge))
    except NotSPD as exc:
        raise RankDeficient(f"{what} is not full rank: {exc}") from None


def projected_grad_b(grad_b: np.ndarray, a: np.ndarray, s: float, ridge: bool = False) -> np.ndarray:
    """``(1/s**2) grad_b (A A^T)^-1``, the least-squares B direction.

    Minimizes ``||s G A - grad_W||_F`` over G when ``grad_b = s grad_W A^T``.
    """
    if s <= 0:
        raise ValueError("scaling s must be positive")
    gram = matmul(a, a.T)
    # G gram = grad_b  <=>  gram G^T = grad_b^T (gram is symmetric)
    return _gram_solve(gram, grad_b.T, ridge, "A").T / s**2


def projected_grad_a(grad_a: np.ndarray, b_next: np.ndarray, s: float, ridge: bool = False) -> np.ndarray:
    """``(1/s**2) (B^T B)^-1 grad_a`` using the already-updated B."""
    if s <= 0:
        raise ValueError("scaling s must be positive")
    gram = matmul(b_next.T, b_next)
    return _gram_solve(gram, grad_a, ridge, "B") / s**2


def row_projector(a: np.ndarray) -> np.ndarray:
    """Orthogonal projector ``A^T (A A^T)^-1 A`` onto the row space of A (n x n)."""
    return matmul(a.T, _gram_solve(matmul(a, a.T), a, False, "A"))


def col_projector(b: np.ndarray) -> np.ndarray:
    """Orthogonal projector ``B (B^T B)^-1 B^T`` onto the column space of B (m x m)."""
    return matmul(b, _gram_solve(matmul(b.T, b), b.T, False, "B"))


class Factor(enum.Enum):
    A = "A"
    B = "B"


class Phase(enum.Enum):
    UPDATE_B = "update_b"
    UPDATE_A = "update_a"
    UPDATE_BOTH = "update_both"
    B_ONLY = "b_only"


@dataclass(frozen=True)
class AlternationSchedule:
    """Blocks of ``block_len`` local steps alternate between the two factors."""

    block_len: int = 1
    first_factor: Factor = Factor.B

    def __post_init__(self):
        if self.block_len < 1:
            raise ValueError("block_len must be >= 1")


def phase_for_step(schedule: AlternationSchedule, k: int) -> Phase:
    """Which factor local step ``k`` (1-based) updates."""
    if k < 1:
        raise ValueError("local step index is 1-based")
    block = (k - 1) // schedule.block_len
    first = schedule.first_factor is Factor.B
    return Phase.UPDATE_B if (block % 2 == 0) == first else Phase.UPDATE_A


class UpdateForms(NamedTuple):
    alternating_delta: np.ndarray
    joint_delta: np.ndarray
    cross_term: np.ndarray


def full_weight_update_forms(
    adapter: LoraAdapter,
    grad_w_k: np.ndarray,
    grad_w_half: np.ndarray,
    eta: float,
    b_next: np.ndarray | None = None,
) -> UpdateForms:
    """Full-weight change of one scaled B-then-A iteration vs. a joint step.

    ``alternating_delta = -eta G_k P_row(A_k) - eta P_col(B_{k+1}) G_{k+1/2}``.
    ``b_next`` defaults to ``B_k - eta * projected_grad_b`` at ``grad_w_k``;
    pass it explicitly to hold the projector fixed while varying ``eta``.

    The joint (simultaneous) step picks up the product of the two scaled
    factor steps, ``cross_term = (eta**2 / s) G A^T (A A^T)^-1 (B^T B)^-1 B^T G``,
    and ``joint_delta = -eta G P_row(A) - eta P_col(B) G + cross_term``.
    """
    a, b, s = adapter.a, adapter.b, adapter.s
    p_row = row_projector(a)
    if b_next is None:
        gb = s * matmul(grad_w_k, a.T)
        b_next = b - eta * projected_grad_b(gb, a, s)
    alternating = -eta * matmul(grad_w_k, p_row) - eta * matmul(col_projector(b_next), grad_w_half)

    left = _gram_solve(matmul(a, a.T), matmul(a, grad_w_k.T), False, "A").T  # G A^T (AA^T)^-1
    right = _gram_solve(matmul(b.T, b), matmul(b.T, grad_w_k), False, "B")  # (B^T B)^-1 B^T G
    cross = (eta**2 / s) * matmul(left, right)
    joint = -eta * matmul(grad_w_k, p_row) - eta * matmul(col_projector(b), grad_w_k) + cross
    return UpdateForms(alternating, joint, cross)
