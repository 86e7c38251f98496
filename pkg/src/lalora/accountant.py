"""Renyi-DP accounting for the subsampled Gaussian mechanism.

Per-step RDP curves on an integer order grid are composed additively over
all noisy local steps and converted to (epsilon, delta).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln, logsumexp

from .dp import PrivacySpec

__all__ = [
    "DEFAULT_ORDERS",
    "RdpCurve",
    "PrivacyLedger",
    "rdp_gaussian",
    "rdp_subsampled_gaussian",
    "subsampled_curve",
    "compose",
    "rdp_to_dp",
    "account_training",
    "epsilon_for",
    "calibrate_sigma",
    "CalibrationError",
    "server_view",
]

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 513))


class CalibrationError(ValueError):
    """The target epsilon cannot be hit inside the sigma bracket."""


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple
    values: tuple

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ValueError("orders and values must have equal length")
        if any(o <= 1 for o in self.orders):
            raise ValueError("RDP orders must exceed 1")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ValueError("orders must be strictly ascending")

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise ValueError("curves live on different order grids")
        return RdpCurve(self.orders, tuple(x + y for x, y in zip(self.values, other.values)))


@dataclass(frozen=True)
class PrivacyLedger:
    steps_composed: int
    curve: RdpCurve
    epsilon: float | None = None
    delta: float | None = None
    argmin_order: float | None = None
    sigma: float | None = None
    rate: float | None = None

    def as_dict(self) -> dict:
        return {
            "steps_composed": self.steps_composed,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "argmin_order": self.argmin_order,
            "sigma": self.sigma,
            "rate": self.rate,
        }


def rdp_gaussian(sigma: float, order: float) -> float:
    """RDP of the Gaussian mechanism with sensitivity 1: ``order / (2 sigma^2)``."""
    if order <= 1:
        raise ValueError("order must exceed 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return order / (2.0 * sigma**2)


def rdp_subsampled_gaussian(sigma: float, rate: float, order: int) -> float:
    """Integer-order RDP bound of the Poisson-subsampled Gaussian mechanism.

    ``log(sum_j C(L, j) (1-q)^(L-j) q^j exp(j(j-1)/(2 sigma^2))) / (L-1)``,
    summed in log space.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    if int(order) != order or order < 2:
        raise ValueError("this bound needs an integer order >= 2")
    order = int(order)
    if rate == 0:
        return 0.0
    if rate == 1:
        return rdp_gaussian(sigma, order)
    j = np.arange(order + 1, dtype=np.float64)
    log_terms = (
        gammaln(order + 1) - gammaln(j + 1) - gammaln(order - j + 1)
        + j * math.log(rate) + (order - j) * math.log1p(-rate)
        + j * (j - 1) / (2.0 * sigma**2)
    )
    return max(float(logsumexp(log_terms)) / (order - 1), 0.0)


@functools.lru_cache(maxsize=256)
def subsampled_curve(sigma: float, rate: float, orders=DEFAULT_ORDERS) -> RdpCurve:
    orders = tuple(orders)
    return RdpCurve(tuple(orders), tuple(rdp_subsampled_gaussian(sigma, rate, o) for o in orders))


def compose(curve: RdpCurve, steps: int) -> RdpCurve:
    """RDP of ``steps`` adaptive repetitions: pointwise ``steps * rho``."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    return RdpCurve(curve.orders, tuple(steps * v for v in curve.values))


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """``min over orders of rho + log(1/delta)/(order - 1)`` and its order."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if not curve.orders:
        raise ValueError("empty RDP curve")
    orders = np.asarray(curve.orders, dtype=np.float64)
    eps = np.asarray(curve.values, dtype=np.float64) + math.log(1.0 / delta) / (orders - 1.0)
    idx = int(np.argmin(eps))
    return float(eps[idx]), float(orders[idx])


def epsilon_for(sigma: float, rate: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> float:
    return rdp_to_dp(compose(subsampled_curve(sigma, rate, orders), steps), delta)[0]


def account_training(spec: PrivacySpec, t_rounds: int, k_steps: int, orders=DEFAULT_ORDERS) -> PrivacyLedger:
    """Ledger for ``t_rounds * k_steps`` noisy steps at sampling rate ``b``.

    Each privatized local step counts once, whichever factor it updates.
    Only ``(sigma, b, T, K, delta)`` enter; nothing applied after the noise
    (smoothing, aggregation) can change the result.
    """
    if not spec.sigma > 0:
        raise ValueError("sigma = 0 is non-private; no epsilon can be reported")
    steps = t_rounds * k_steps
    curve = compose(subsampled_curve(spec.sigma, spec.batch_fraction, orders), steps)
    if steps == 0:
        return PrivacyLedger(0, curve, 0.0, spec.delta, None, spec.sigma, spec.batch_fraction)
    eps, order = rdp_to_dp(curve, spec.delta)
    return PrivacyLedger(steps, curve, eps, spec.delta, order, spec.sigma, spec.batch_fraction)


def calibrate_sigma(
    epsilon_target: float,
    delta: float,
    t_rounds: int,
    k_steps: int,
    rate: float,
    bracket: tuple[float, float] = (1e-2, 1e3),
    rel_tol: float = 1e-3,
    orders=DEFAULT_ORDERS,
) -> float:
    """Bisect (in log sigma) for the noise multiplier that spends ``epsilon_target``.

    Stops once the spent epsilon is within ``rel_tol`` (relative) of the target.
    """
    if not epsilon_target > 0:
        raise ValueError("epsilon_target must be positive")
    steps = t_rounds * k_steps

    def eps(sig):
        return epsilon_for(sig, rate, steps, delta, orders)

    lo, hi = bracket
    if eps(hi) > epsilon_target:
        raise CalibrationError(f"even sigma={hi} spends more than epsilon={epsilon_target}")
    if eps(lo) < epsilon_target:
        raise CalibrationError(f"sigma={lo} already spends less than epsilon={epsilon_target}")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        e = eps(mid)
        if abs(e - epsilon_target) <= rel_tol * epsilon_target:
            return mid
        if e > epsilon_target:
            lo = mid
        else:
            hi = mid
    return hi


class ServerView(NamedTuple):
    epsilon: float
    delta: float


def server_view(epsilon: float, delta: float, n_clients: int, client_rate: float) -> ServerView:
    """Guarantee toward the server: ``eps sqrt(N/q)`` and ``(delta/2)(1/q + 1)``."""
    return ServerView(epsilon * math.sqrt(n_clients / client_rate), delta / 2.0 * (1.0 / client_rate + 1.0))
