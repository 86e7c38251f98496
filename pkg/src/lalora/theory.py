"""Synthetic matrix-sensing problems for checking the alternating-update guarantees.

The objective is ``L(B, A) = 0.5 || sum_i C_i (B_i A_i - X*) ||_F^2`` with
sensing operators ``C_i`` (n x d), target ``X*`` (d x c) of rank <= r,
and factor blocks ``B_i`` (d x r), ``A_i`` (r x c).
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .lora import RankDeficient, col_projector, row_projector
from .numkit import NotSPD, SeededRng, ShapeError, matmul, power_iteration, solve_spd

__all__ = [
    "SensingKind",
    "SensingProblem",
    "Factors",
    "gen_sensing",
    "estimate_rip_delta",
    "sensing_loss",
    "sensing_grads",
    "grad_a_all",
    "grad_b_all",
    "scaled_alt_step",
    "half_steps",
    "contraction_rate",
    "admissible_eta",
    "ContractionReport",
    "verify_contraction",
    "aligned_init",
    "random_init",
    "cross_gram_norms",
    "preconditioned_grad_norm_a",
    "ffa_subspace_gap",
    "rolora_remainder",
]


class SensingKind(str, enum.Enum):
    ORTHONORMAL = "orthonormal"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class SensingProblem:
    c_ops: tuple
    x_star: np.ndarray
    rank: int
    delta_r: float | None = None  # exact where the construction forces it
    kind: SensingKind = SensingKind.GAUSSIAN

    @property
    def p_blocks(self) -> int:
        return len(self.c_ops)


class Factors(NamedTuple):
    b: tuple  # P blocks, each d x r
    a: tuple  # P blocks, each r x c


def gen_sensing(n: int, d: int, c: int, r: int, p_blocks: int, kind, rng: SeededRng) -> SensingProblem:
    """Random sensing problem with target ``X* = U V`` (d x r times r x c)."""
    kind = SensingKind(kind)
    if not 1 <= r <= min(d, c):
        raise ValueError(f"rank {r} must lie in [1, min(d, c)] = [1, {min(d, c)}]")
    if p_blocks < 1:
        raise ValueError("need at least one block")
    if kind is SensingKind.ORTHONORMAL and n < d:
        raise ValueError("orthonormal columns need n >= d")
    ops = []
    for i in range(p_blocks):
        g = rng.child("C", i).normal(n * d).reshape(n, d)
        if kind is SensingKind.ORTHONORMAL:
            q, rr = np.linalg.qr(g)
            ops.append(q * np.sign(np.diag(rr)))
        else:
            ops.append(g / math.sqrt(n))
    u = rng.child("U").normal(d * r).reshape(d, r)
    v = rng.child("V").normal(r * c).reshape(r, c)
    delta = 0.0 if kind is SensingKind.ORTHONORMAL else None
    return SensingProblem(tuple(ops), matmul(u, v), r, delta, kind)


def _random_rank_r_unit(d, c, r, rng: SeededRng) -> np.ndarray:
    m = matmul(rng.child("u").normal(d * r).reshape(d, r), rng.child("v").normal(r * c).reshape(r, c))
    return m / np.linalg.norm(m)


def estimate_rip_delta(problem: SensingProblem, trials: int, rng: SeededRng | None = None) -> float:
    """Sampled lower bound on the RIP constant.

    Max over random rank-r probes ``M`` with ``||M||_F = 1`` and over blocks
    of ``| ||C_i M||_F^2 - 1 |``. Values above 1 mean RIP fails outright.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = rng or SeededRng(0, ("rip",))
    d, c = problem.x_star.shape
    worst = 0.0
    for t in range(trials):
        m = _random_rank_r_unit(d, c, problem.rank, rng.child(t))
        for op in problem.c_ops:
            worst = max(worst, abs(float(np.sum(matmul(op, m) ** 2)) - 1.0))
    return worst


def _residual(problem: SensingProblem, b, a) -> np.ndarray:
    """``sum_i C_i (B_i A_i - X*)`` (n x c)."""
    total = None
    for op, b_i, a_i in zip(problem.c_ops, b, a):
        term = matmul(op, matmul(b_i, a_i) - problem.x_star)
        total = term if total is None else total + term
    return total


def sensing_loss(problem: SensingProblem, factors: Factors) -> float:
    return 0.5 * float(np.sum(_residual(problem, factors.b, factors.a) ** 2))


def recovery_error(problem: SensingProblem, factors: Factors) -> float:
    """``|| sum_i B_i A_i - X* ||_F^2``."""
    total = sum(matmul(b_i, a_i) for b_i, a_i in zip(factors.b, factors.a))
    return float(np.sum((total - problem.x_star) ** 2))


def grad_a_all(problem: SensingProblem, b, a) -> list:
    """``grad_{A_i} = B_i^T C_i^T sum_j C_j (B_j A_j - X*)``."""
    res = _residual(problem, b, a)
    return [matmul(b_i.T, matmul(op.T, res)) for op, b_i in zip(problem.c_ops, b)]


def grad_b_all(problem: SensingProblem, b, a) -> list:
    """``grad_{B_i} = sum_j C_i^T C_j (B_j A_j - X*) A_i^T``, as a double sum.

    The trailing factor is the block's own ``A_i``; writing ``A_j`` there only
    agrees with the derivative when P = 1.
    """
    out = []
    for op_i, a_i in zip(problem.c_ops, a):
        g = np.zeros((problem.x_star.shape[0], problem.rank))
        for op_j, b_j, a_j in zip(problem.c_ops, b, a):
            g += matmul(matmul(op_i.T, op_j), matmul(matmul(b_j, a_j) - problem.x_star, a_i.T))
        out.append(g)
    return out


def sensing_grads(problem: SensingProblem, factors: Factors, a_next=None) -> list:
    """Per-block ``(grad_A_i, grad_B_i)``.

    The B-gradient is evaluated at ``a_next`` (the already-updated A blocks)
    when given, which is the convention of the alternating iteration.
    """
    b, a = factors
    ga = grad_a_all(problem, b, a)
    gb = grad_b_all(problem, b, a if a_next is None else a_next)
    return list(zip(ga, gb))


def _solve(gram, rhs, what):
    try:
        return solve_spd(gram, rhs)
    except NotSPD as exc:
        raise RankDeficient(f"{what} Gram matrix is singular: {exc}") from None


def contraction_rate(eta: float, delta_r: float, p_blocks: int) -> float:
    """``2P(1 - delta)(eta - eta^2 (1 + delta + 1/P) / 2)``."""
    return 2 * p_blocks * (1 - delta_r) * (eta - eta**2 * (1 + delta_r + 1.0 / p_blocks) / 2)


def admissible_eta(delta_r: float, p_blocks: int) -> float:
    return 1.0 / (1.0 + delta_r + 1.0 / p_blocks)


def half_steps(problem: SensingProblem, factors: Factors, eta: float) -> tuple[Factors, Factors]:
    """One alternating iteration, returning ``(B_k, A_{k+1})`` and ``(B_{k+1}, A_{k+1})``.

    A moves first, preconditioned by ``(B^T B)^-1``; B then moves at the new
    A, preconditioned by ``(A_{k+1} A_{k+1}^T)^-1``.
    """
    b, a = tuple(factors.b), tuple(factors.a)
    ga = grad_a_all(problem, b, a)
    a_next = tuple(a_i - eta * _solve(matmul(b_i.T, b_i), g, "B") for a_i, b_i, g in zip(a, b, ga))
    gb = grad_b_all(problem, b, a_next)
    b_next = tuple(
        b_i - eta * _solve(matmul(a_i, a_i.T), g.T, "A").T for b_i, a_i, g in zip(b, a_next, gb)
    )
    return Factors(b, a_next), Factors(b_next, a_next)


def scaled_alt_step(problem: SensingProblem, factors: Factors, eta: float, delta_r: float | None = None) -> Factors:
    """One full scaled alternating iteration (A then B).

    Warns when ``eta`` exceeds ``1 / (1 + delta + 1/P)``; the step is still taken.
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    delta = problem.delta_r if delta_r is None else delta_r
    if delta is not None and eta > admissible_eta(delta, problem.p_blocks):
        warnings.warn("step size above the admissible bound; no contraction guarantee", RuntimeWarning, stacklevel=2)
    return half_steps(problem, factors, eta)[1]


@dataclass
class ContractionReport:
    ratios: list
    losses: list
    bound: float
    eta_c: float
    initial_error: float
    final_error: float
    applicable: bool
    passed: bool
    failures: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "bound": self.bound,
            "eta_c": self.eta_c,
            "max_ratio": max(self.ratios) if self.ratios else None,
            "initial_error": self.initial_error,
            "final_error": self.final_error,
            "iterations": len(self.losses) - 1,
            "applicable": self.applicable,
            "passed": self.passed,
            "failures": self.failures[:10],
        }


def verify_contraction(
    problem: SensingProblem,
    factors0: Factors,
    eta: float,
    iters: int,
    delta_r: float | None = None,
    tol: float = 1e-9,
) -> ContractionReport:
    """Run ``iters`` scaled alternating iterations and check the geometric bounds.

    Ratios are only taken while the loss is above ``tol``. With ``eta`` above
    the admissible bound the report says the guarantee is not applicable
    instead of failing.
    """
    delta = problem.delta_r if delta_r is None else delta_r
    if delta is None:
        raise ValueError("delta_r unknown; pass an estimate explicitly")
    applicable = 0 <= eta <= admissible_eta(delta, problem.p_blocks)
    eta_c = contraction_rate(eta, delta, problem.p_blocks)
    bound = (1 - eta_c) ** 2
    f = factors0
    losses = [sensing_loss(problem, f)]
    ratios, failures = [], []
    init_err = recovery_error(problem, f)
    for k in range(1, iters + 1):
        f = half_steps(problem, f, eta)[1]
        losses.append(sensing_loss(problem, f))
        if losses[-2] > tol:
            ratio = losses[-1] / losses[-2]
            ratios.append(ratio)
            if ratio > bound + tol:
                failures.append(f"iteration {k}: ratio {ratio:.6g} > {bound:.6g}")
    final_err = recovery_error(problem, f)
    err_bound = (1 + delta) / (1 - delta) * (1 - eta_c) ** (2 * iters) * init_err if delta < 1 else math.inf
    if final_err > err_bound + tol:
        failures.append(f"final recovery error {final_err:.3g} above bound {err_bound:.3g}")
    return ContractionReport(
        ratios, losses, bound, eta_c, init_err, final_err, applicable,
        passed=applicable and not failures, failures=failures,
    )


def aligned_init(problem: SensingProblem, rng: SeededRng, scale: float = 0.5) -> Factors:
    """Factors whose column/row spaces already match those of ``X*``.

    ``B_i = U G_i`` and ``A_i = H_i V^T`` for the top-r singular pairs of X*
    and random invertible ``G_i, H_i``. The residual then stays inside both
    factor subspaces, which is the regime where the per-iteration bound can hold.
    """
    u, sv, vt = np.linalg.svd(problem.x_star)
    r = problem.rank
    u, vt = u[:, :r], vt[:r]
    b, a = [], []
    for i in range(problem.p_blocks):
        g = np.eye(r) + scale * rng.child("G", i).normal(r * r).reshape(r, r) / math.sqrt(r)
        h = np.eye(r) + scale * rng.child("H", i).normal(r * r).reshape(r, r) / math.sqrt(r)
        b.append(matmul(u, g))
        a.append(matmul(h, vt) * scale)
    return Factors(tuple(b), tuple(a))


def random_init(problem: SensingProblem, rng: SeededRng, scale: float = 1.0) -> Factors:
    d, c = problem.x_star.shape
    r = problem.rank
    b = tuple(scale * rng.child("B", i).normal(d * r).reshape(d, r) for i in range(problem.p_blocks))
    a = tuple(scale * rng.child("A", i).normal(r * c).reshape(r, c) for i in range(problem.p_blocks))
    return Factors(b, a)


def cross_gram_norms(problem: SensingProblem, delta_r: float, iters: int = 500) -> dict:
    """Spectral norms ``||C_i^T C_j||_2`` (i != j) against ``(1 + delta)/(P(P-1))``.

    Violations are reported, not raised.
    """
    p = problem.p_blocks
    if p < 2:
        return {"limit": None, "max_norm": 0.0, "satisfied": True, "unconverged": 0}
    limit = (1 + delta_r) / (p * (p - 1))
    worst, unconverged = 0.0, 0
    for i in range(p):
        for j in range(p):
            if i == j:
                continue
            m = matmul(problem.c_ops[i].T, problem.c_ops[j])
            res = power_iteration(lambda v, m=m: m.T @ (m @ v), m.shape[1], iters=iters, tol=1e-12)
            worst = max(worst, math.sqrt(max(res.value, 0.0)))
            unconverged += not res.converged
    return {"limit": limit, "max_norm": worst, "satisfied": worst <= limit, "unconverged": unconverged}


def preconditioned_grad_norm_a(problem: SensingProblem, factors: Factors, i: int = 0) -> float:
    """``|| (B_i^T B_i)^{-1/2} grad_{A_i} ||_F^2`` via the Gram solve."""
    b_i = factors.b[i]
    g = grad_a_all(problem, factors.b, factors.a)[i]
    return float(np.sum(g * _solve(matmul(b_i.T, b_i), g, "B")))


def ffa_subspace_gap(a0: np.ndarray, delta_w: np.ndarray) -> float:
    """Distance from ``delta_w`` to the matrices whose rows lie in ``row(a0)``."""
    if delta_w.shape[1] != a0.shape[1]:
        raise ShapeError("delta_w and a0 must share the column dimension")
    p = row_projector(a0)
    return float(np.linalg.norm(delta_w - matmul(delta_w, p)))


def rolora_remainder(grad_k: np.ndarray, grad_half: np.ndarray, eta: float, b_next: np.ndarray, a_next: np.ndarray) -> np.ndarray:
    """Stale-block term of a B-round followed by an A-round.

    ``E = -eta (P_col(B') (G_k - G_half) + (G_half - G_k) P_row(A'))``.
    Its Frobenius norm is at most ``2 eta^2 L ||G_k||`` for an L-smooth loss.
    """
    diff = grad_k - grad_half
    return -eta * (matmul(col_projector(b_next), diff) - matmul(diff, row_projector(a_next)))
