"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Per-step divergences are computed in log space with the integer-order
binomial expansion; fractional orders are linearly interpolated in the
log-moment domain, which is convex in the order and therefore yields a
conservative (upper-bound) curve. Composition over steps is linear, and the
conversion to (epsilon, delta) uses the classic

    eps(delta) = min over orders a of [ eps(a) + log(1/delta) / (a - 1) ].

Poisson subsampling is assumed throughout; every serialized report echoes
this assumption so it stays auditable. Overflowing budgets are carried as an
``OVERFLOW`` sentinel instead of raw infinities when serialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import gammaln

from .errors import CalibrationError, ParameterError

#: In-memory overflow sentinel; serialized as the string "OVERFLOW".
OVERFLOW = math.inf

#: Epsilon cap above which a conversion reports OVERFLOW.
DEFAULT_EPSILON_CAP = 1e15

#: Order grid: dense near 1 for small budgets, coarse tail for extreme ones.
DEFAULT_ORDERS: tuple[float, ...] = tuple(
    [1.0 + 0.25 * k for k in range(1, 13)] + list(range(5, 65)) + [128.0, 256.0, 512.0]
)

_SIGMA_BRACKET = (1e-4, 1e3)
_EXTREME_TARGET = 1e6


@dataclass(frozen=True)
class PrivacyParams:
    """Description of one DP-SGD mechanism run."""

    noise_multiplier: float
    clip_norm: float
    sampling_rate: float
    steps: int
    delta: float

    def __post_init__(self):
        if self.noise_multiplier < 0:
            raise ParameterError(f"noise multiplier must be >= 0, got {self.noise_multiplier}")
        if self.clip_norm <= 0:
            raise ParameterError(f"clip norm must be positive, got {self.clip_norm}")
        if not 0 < self.sampling_rate <= 1:
            raise ParameterError(f"sampling rate must be in (0, 1], got {self.sampling_rate}")
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if not 0 < self.delta < 1:
            raise ParameterError(f"delta must be in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class RdpCurve:
    """Cumulative Renyi divergence per order."""

    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ParameterError("orders and values must have equal length")
        if any(a <= 1 for a in self.orders):
            raise ParameterError("all orders must be > 1")
        if list(self.orders) != sorted(self.orders):
            raise ParameterError("orders must be ascending")
        if any(v < 0 for v in self.values):
            raise ParameterError("divergence values must be nonnegative")


@dataclass(frozen=True)
class PrivacySpent:
    """(epsilon, delta) spend; ``epsilon`` may be the OVERFLOW sentinel."""

    epsilon: float
    delta: float
    order: float | None = None

    @property
    def is_overflow(self) -> bool:
        return math.isinf(self.epsilon)

    def json_epsilon(self):
        return "OVERFLOW" if self.is_overflow else self.epsilon


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    lo, hi = min(a, b), max(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_moment_int(q: float, sigma: float, alpha: int) -> float:
    """log E_{x~N(0,s^2)} [ ((1-q) + q e^{(2x-1)/(2s^2)})^alpha ], alpha integer."""
    log_q = math.log(q)
    log_1mq = math.log1p(-q) if q < 1 else -math.inf
    total = -math.inf
    for i in range(alpha + 1):
        log_coef = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
        term = log_coef + i * log_q + (alpha - i) * log_1mq + (i * i - i) / (2 * sigma**2)
        total = _log_add(total, term)
    return float(total)


def rdp_step(sigma: float, q: float, alpha: float) -> float:
    """Per-step Renyi divergence of the subsampled Gaussian at order ``alpha``.

    ``sigma == 0`` returns the OVERFLOW sentinel (a non-private release);
    ``q == 1`` reduces exactly to the closed form ``alpha / (2 sigma^2)``.
    """
    if alpha <= 1:
        raise ParameterError(f"order must be > 1, got {alpha}")
    if not 0 <= q <= 1:
        raise ParameterError(f"sampling rate must be in [0, 1], got {q}")
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return OVERFLOW
    if q == 0 or math.isinf(sigma):
        return 0.0
    if q == 1:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_moment_int(q, sigma, int(alpha))
    else:
        # convex in alpha, so the chord between adjacent integers is an upper bound
        lo, hi = math.floor(alpha), math.ceil(alpha)
        log_lo = 0.0 if lo == 1 else _log_moment_int(q, sigma, lo)
        log_hi = _log_moment_int(q, sigma, hi)
        frac = alpha - lo
        log_a = (1 - frac) * log_lo + frac * log_hi
    return max(0.0, log_a / (alpha - 1))


def step_curve(sigma: float, q: float, orders=DEFAULT_ORDERS) -> RdpCurve:
    """Per-step RDP curve over ``orders``."""
    return RdpCurve(tuple(orders), tuple(rdp_step(sigma, q, a) for a in orders))


def compose(curve: RdpCurve, steps: int) -> RdpCurve:
    """RDP after ``steps``-fold composition (values scale linearly)."""
    if steps < 0:
        raise ParameterError(f"steps must be >= 0, got {steps}")
    return RdpCurve(curve.orders, tuple(v * steps for v in curve.values))


def to_epsilon_delta(curve: RdpCurve, delta: float,
                     cap: float = DEFAULT_EPSILON_CAP) -> PrivacySpent:
    """Convert an RDP curve to an (epsilon, delta) guarantee.

    Returns the best (smallest) epsilon over the curve's orders together
    with the minimizing order; reports OVERFLOW when every order exceeds
    ``cap``.
    """
    if not 0 < delta < 1:
        raise ParameterError(f"delta must be in (0, 1), got {delta}")
    if not curve.orders:
        raise ParameterError("cannot convert an empty curve")
    if all(v == 0.0 for v in curve.values):
        return PrivacySpent(0.0, delta, None)  # nothing was released
    log_inv_delta = math.log(1 / delta)
    best_eps, best_order = math.inf, None
    for a, v in zip(curve.orders, curve.values):
        if math.isinf(v):
            continue
        eps = v + log_inv_delta / (a - 1)
        if eps < best_eps:
            best_eps, best_order = eps, a
    if best_order is None or best_eps > cap:
        return PrivacySpent(OVERFLOW, delta, None)
    return PrivacySpent(max(0.0, best_eps), delta, best_order)


def spend(params: PrivacyParams, orders=DEFAULT_ORDERS) -> PrivacySpent:
    """Privacy spent by a full mechanism description."""
    if params.noise_multiplier == 0:
        return PrivacySpent(OVERFLOW, params.delta, None)
    curve = compose(step_curve(params.noise_multiplier, params.sampling_rate, orders),
                    params.steps)
    return to_epsilon_delta(curve, params.delta)


def _epsilon_at(sigma: float, q: float, steps: int, delta: float) -> float:
    return to_epsilon_delta(compose(step_curve(sigma, q), steps), delta).epsilon


def calibrate_sigma(target_epsilon: float, delta: float, q: float, steps: int,
                    bracket: tuple[float, float] = _SIGMA_BRACKET) -> float:
    """Smallest-noise multiplier whose spend lands just under the target.

    Bisects sigma until the spent epsilon falls in ``[0.99 t, t]``. Extreme
    targets (>= 1e6) use a widened bracket and a looser log-space window; if
    even the least-noisy sigma cannot spend the full budget, the budget is
    not binding and the bracket's lower edge is returned.

    Raises:
        CalibrationError: if the target is unreachable inside the bracket.
    """
    if target_epsilon <= 0:
        raise ParameterError(f"target epsilon must be positive, got {target_epsilon}")
    if steps <= 0:
        raise CalibrationError("cannot calibrate a mechanism with zero steps")

    lo, hi = bracket
    if target_epsilon >= _EXTREME_TARGET:
        lo = min(lo, 1e-5)
        eps_lo = _epsilon_at(lo, q, steps, delta)
        if eps_lo < target_epsilon:
            return lo  # budget not binding: every sigma in range satisfies it
        window = (0.95 * target_epsilon, target_epsilon)
    else:
        eps_lo = _epsilon_at(lo, q, steps, delta)
        if eps_lo < target_epsilon:
            raise CalibrationError(
                f"target epsilon {target_epsilon} unreachable within sigma "
                f"bracket [{bracket[0]}, {bracket[1]}] (max spend {eps_lo})")
        window = (0.99 * target_epsilon, target_epsilon)

    eps_hi = _epsilon_at(hi, q, steps, delta)
    if eps_hi > target_epsilon:
        raise CalibrationError(
            f"target epsilon {target_epsilon} unreachable within sigma "
            f"bracket [{bracket[0]}, {bracket[1]}] (min spend {eps_hi})")

    s_lo, s_hi = lo, hi
    for _ in range(200):
        mid = math.sqrt(s_lo * s_hi)
        eps = _epsilon_at(mid, q, steps, delta)
        if window[0] <= eps <= window[1]:
            return mid
        if eps > target_epsilon:
            s_lo = mid
        else:
            s_hi = mid
    raise CalibrationError(
        f"calibration did not converge for target {target_epsilon} in bracket {bracket}")
