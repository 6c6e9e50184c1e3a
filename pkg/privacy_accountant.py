"""
Privacy accounting for DPSGD runs.
Renyi-DP of the subsampled Gaussian mechanism, linear composition over steps,
and conversion to an (epsilon, delta) guarantee.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, special

logger = logging.getLogger(__name__)

DEFAULT_ORDERS: Tuple[int, ...] = tuple(range(2, 65))
DEFAULT_DELTA = 1e-5


class NoFiniteOrderError(ValueError):
    """Every order of the curve is infinite, so no epsilon can be derived."""

    def __init__(self):
        super().__init__("no finite order")


@dataclass(frozen=True)
class MechanismParams:
    """Subsampled Gaussian mechanism applied `steps` times."""
    q: float
    sigma: float
    steps: int

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError(f"sampling rate q must be in (0, 1], got {self.q}")
        if not self.sigma > 0:
            raise ValueError(f"noise multiplier must be > 0, got {self.sigma}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class RdpCurve:
    """Per-order RDP values (nats). Infinite entries mark overflowed orders."""
    orders: Tuple[float, ...]
    values: Tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ValueError("orders and values must have the same length")
        if any(a <= 1 for a in self.orders):
            raise ValueError("Renyi orders must be > 1")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ValueError("orders must be strictly increasing")
        if any(math.isnan(v) or v < 0 for v in self.values):
            raise ValueError("RDP values must be non-negative")

    def to_dict(self) -> Dict[str, list]:
        return {
            "orders": list(self.orders),
            "values": [v if math.isfinite(v) else None for v in self.values],
        }


@dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float
    order: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")


def rdp_step(q: float, sigma: float, order: int) -> float:
    """
    RDP of one subsampled Gaussian step at integer order alpha >= 2:

        1/(alpha-1) * log sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1)/(2 sigma^2))

    evaluated in log space. Overflow comes back as +inf.
    """
    if order < 2 or int(order) != order:
        raise ValueError(f"order must be an integer >= 2, got {order}")
    if sigma <= 0:
        raise ValueError(f"noise multiplier must be > 0, got {sigma}")
    if not 0 <= q <= 1:
        raise ValueError(f"sampling rate must be in [0, 1], got {q}")
    alpha = int(order)
    if q == 0:
        return 0.0
    if q == 1:
        # Only the k = alpha term survives: the plain Gaussian mechanism.
        return alpha / (2.0 * sigma ** 2)

    k = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + k * (k - 1) / (2.0 * sigma ** 2)
    )
    with np.errstate(over="ignore"):
        log_a = float(special.logsumexp(log_terms))
    if not math.isfinite(log_a):
        return math.inf
    # Guard tiny negative round-off at very small q.
    return max(log_a / (alpha - 1), 0.0)


def step_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    return RdpCurve(tuple(orders), tuple(rdp_step(q, sigma, a) for a in orders))


def compose(curve_per_step: RdpCurve, steps: int) -> RdpCurve:
    """RDP composes additively: scale every order by the number of steps."""
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if steps == 0:
        return RdpCurve(curve_per_step.orders, tuple(0.0 for _ in curve_per_step.values))
    return RdpCurve(curve_per_step.orders, tuple(v * steps for v in curve_per_step.values))


def to_epsilon(curve: RdpCurve, delta: float) -> PrivacySpend:
    """Best (epsilon, delta) over the finite orders of the curve."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    orders = np.asarray(curve.orders, dtype=np.float64)
    values = np.asarray(curve.values, dtype=np.float64)
    finite = np.isfinite(values)
    if not finite.any():
        raise NoFiniteOrderError()

    eps = values[finite] + math.log(1.0 / delta) / (orders[finite] - 1.0)
    best = int(np.argmin(eps))
    order = float(orders[finite][best])
    logger.debug(f"epsilon {eps[best]:.6g} at order {order:g} (delta={delta:g})")
    return PrivacySpend(epsilon=float(eps[best]), delta=delta, order=order)


def rdp_of_run(params: MechanismParams, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    return compose(step_curve(params.q, params.sigma, orders), params.steps)


def epsilon_of_run(params: MechanismParams, delta: float = DEFAULT_DELTA,
                   orders: Sequence[int] = DEFAULT_ORDERS) -> PrivacySpend:
    """The epsilon a DPSGD trial spends; this is the epsilon in the reward."""
    return to_epsilon(rdp_of_run(params, orders), delta)


def steps_for(train_size: int, batch_size: int, epochs: int) -> int:
    """Noisy steps of a run that walks every batch of every epoch."""
    return epochs * math.ceil(train_size / batch_size)


def find_noise_multiplier(q: float, steps: int, delta: float, target_epsilon: float,
                          sigma_lo: float = 0.1, sigma_hi: float = 100.0,
                          tol: float = 1e-6) -> float:
    """
    Smallest noise multiplier whose run epsilon stays within target_epsilon.

    Epsilon is non-increasing in sigma, so a root of eps(sigma) - target is
    bracketed between sigma_lo and sigma_hi. Raises ValueError when even
    sigma_hi is not private enough.
    """
    def excess(sigma: float) -> float:
        return epsilon_of_run(MechanismParams(q, sigma, steps), delta).epsilon - target_epsilon

    if excess(sigma_hi) > 0:
        raise ValueError(
            f"target epsilon {target_epsilon} unreachable with sigma <= {sigma_hi}"
        )
    if excess(sigma_lo) <= 0:
        return sigma_lo
    sigma = optimize.brentq(excess, sigma_lo, sigma_hi, xtol=tol)
    # brentq may land a hair below the root; step up until the target holds.
    while excess(sigma) > 0:
        sigma += tol
    return sigma
