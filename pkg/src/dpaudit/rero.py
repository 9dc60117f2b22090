"""Reconstruction-robustness bounds for worst-case and relaxed adversaries.

Both bounds map a composed RDP curve to an upper bound ``gamma`` on the
fraction of records an attacker can reconstruct, given a prior success
probability ``kappa`` (the chance a mechanism-blind adversary guesses the
record). The worst-case bound minimizes ``(kappa * e^{eps(a)})^{(a-1)/a}``
over orders. The relaxed bound models the attacker's only decision, "is this
candidate the target?", as a binary hypothesis test: it evaluates the power
of the optimal test at level ``kappa`` under a Gaussian trade-off
approximation of the mechanism and is therefore APPROXIMATE; reports flag it
as such. Two Monte Carlo games provide independent soundness checks: a
nearest-candidate reconstruction game and a privacy-loss sampler that lower
estimates the true epsilon of the subsampled Gaussian.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import accountant
from .accountant import PrivacyParams, RdpCurve
from .errors import ParameterError
from .numerics import Rng


class ThreatModel(enum.Enum):
    WORST_CASE = "worst_case"
    RELAXED = "relaxed"
    REALISTIC = "realistic"


@dataclass(frozen=True)
class ReroParams:
    """Inputs of a reconstruction-robustness bound.

    ``prior`` is the baseline success probability of a prior-only adversary;
    ``error_threshold`` is carried for reporting but never interpreted: the
    bounds depend on the prior alone.
    """

    privacy: PrivacyParams
    prior: float
    error_threshold: float = 0.0

    def __post_init__(self):
        if not 0 < self.prior <= 1:
            raise ParameterError(f"prior must be in (0, 1], got {self.prior}")
        if self.error_threshold < 0:
            raise ParameterError("error threshold must be nonnegative")


@dataclass(frozen=True)
class ReroBound:
    gamma: float
    threat_model: ThreatModel
    minimizing_order: float | None = None

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ParameterError(f"gamma must be in [0, 1], got {self.gamma}")


def _normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _normal_quantile(p: float) -> float:
    import statistics

    return statistics.NormalDist().inv_cdf(p)


def _composed_curve(params: PrivacyParams) -> RdpCurve | None:
    """Composed curve, or None when the mechanism is non-private."""
    if params.noise_multiplier == 0:
        return None
    return accountant.compose(
        accountant.step_curve(params.noise_multiplier, params.sampling_rate),
        params.steps)


def worst_case_bound(params: ReroParams) -> ReroBound:
    """Upper bound on reconstruction success for the worst-case adversary.

    gamma = min over RDP orders a of min(1, (kappa * e^{eps(a)})^{(a-1)/a}).
    A mechanism with zero divergence reveals nothing beyond the prior, so the
    bound collapses to ``kappa`` exactly; an overflowing (non-private)
    mechanism yields 1.
    """
    kappa = params.prior
    curve = _composed_curve(params.privacy)
    if curve is None:
        return ReroBound(1.0, ThreatModel.WORST_CASE)
    if all(v == 0.0 for v in curve.values):
        return ReroBound(kappa, ThreatModel.WORST_CASE)
    log_kappa = math.log(kappa)
    best, best_order = 1.0, None
    for a, v in zip(curve.orders, curve.values):
        if math.isinf(v):
            continue
        log_gamma = (a - 1) / a * (log_kappa + v)
        gamma = 1.0 if log_gamma >= 0 else math.exp(log_gamma)
        if gamma < best:
            best, best_order = gamma, a
    return ReroBound(max(best, kappa), ThreatModel.WORST_CASE, best_order)


def gaussian_equivalent(curve: RdpCurve) -> float:
    """Effective Gaussian trade-off parameter fitted from an RDP curve.

    A Gaussian mechanism with parameter mu has the curve ``a mu^2 / 2``; the
    fit takes the smallest envelope over the order grid, which is exact for
    the full-batch Gaussian and matches the small-order quadratic regime of
    the subsampled mechanism.
    """
    mus = [math.sqrt(2 * v / a) for a, v in zip(curve.orders, curve.values)
           if not math.isinf(v)]
    if not mus:
        return math.inf
    return min(mus)


def relaxed_bound(params: ReroParams) -> ReroBound:
    """Upper bound for the relaxed adversary (perfect-or-fail oracle).

    The adversary only decides whether a candidate reconstruction equals the
    target; the bound is the power of the optimal binary hypothesis test at
    level ``kappa`` under the fitted Gaussian trade-off:

        gamma = Phi( mu + Phi^{-1}(kappa) ).

    This approximation is clamped to never exceed the worst-case bound on the
    same parameters.
    """
    kappa = params.prior
    wc = worst_case_bound(params)
    curve = _composed_curve(params.privacy)
    if curve is None:
        return ReroBound(1.0, ThreatModel.RELAXED)
    mu = gaussian_equivalent(curve)
    if math.isinf(mu):
        return ReroBound(min(1.0, wc.gamma), ThreatModel.RELAXED)
    if kappa == 1.0:
        return ReroBound(1.0, ThreatModel.RELAXED)
    gamma = _normal_cdf(mu + _normal_quantile(kappa))
    gamma = min(max(gamma, kappa), wc.gamma)
    return ReroBound(gamma, ThreatModel.RELAXED)


def mc_reconstruction_game(n_candidates: int, sigma_effective: float, trials: int,
                           rng: Rng) -> tuple[float, float]:
    """Empirical reconstruction game used to sanity-check the bounds.

    A target is drawn uniformly from ``n_candidates`` orthogonal unit vectors
    (prior 1/n), released with i.i.d. Gaussian noise of scale
    ``sigma_effective``, and the adversary picks the nearest candidate.

    Returns:
        (success rate, binomial standard error).
    """
    if n_candidates < 2:
        raise ParameterError("need at least two candidates")
    if trials < 1000:
        raise ParameterError("need at least 1000 trials for a meaningful rate")
    # nearest orthogonal unit candidate == argmax coordinate; put targets at 0
    noise = rng.normal((trials, n_candidates), std=1.0) * sigma_effective
    noise[:, 0] += 1.0
    successes = int((np.argmax(noise, axis=1) == 0).sum())
    rate = successes / trials
    std_error = math.sqrt(max(rate * (1 - rate), 1.0 / trials) / trials)
    return rate, std_error


def game_privacy_params(sigma_effective: float, delta: float = 1e-5) -> PrivacyParams:
    """Mechanism description matching one round of the reconstruction game.

    Candidates sit at pairwise l2 distance sqrt(2), so the equivalent noise
    multiplier is ``sigma_effective / sqrt(2)``.
    """
    return PrivacyParams(noise_multiplier=sigma_effective / math.sqrt(2.0),
                         clip_norm=1.0, sampling_rate=1.0, steps=1, delta=delta)


def mc_privacy_loss_epsilon(q: float, sigma: float, steps: int, delta: float,
                            trials: int = 200_000, rng: Rng | None = None) -> float:
    """Monte Carlo lower estimate of the composed mechanism's true epsilon.

    Samples the privacy-loss random variable of the subsampled Gaussian in
    both adjacency directions, composes it over ``steps`` draws, and inverts
    the empirical hockey-stick divergence at ``delta``. Used as an
    independent soundness oracle for the RDP accountant (which must upper
    bound the value returned here).
    """
    if rng is None:
        rng = Rng(0)
    log_q, log_1mq = math.log(q), math.log1p(-q)
    loss_with = np.zeros(trials)     # log Q/P under Q (record present)
    loss_without = np.zeros(trials)  # log P/Q under P (record absent)
    for _ in range(steps):
        hit = rng.uniform(trials) < q
        x = rng.normal(trials, std=1.0) * sigma + hit
        t = (2 * x - 1) / (2 * sigma**2)
        loss_with += np.logaddexp(log_1mq, log_q + t)
        y = rng.normal(trials, std=1.0) * sigma
        ty = (2 * y - 1) / (2 * sigma**2)
        loss_without -= np.logaddexp(log_1mq, log_q + ty)

    def eps_for(losses: np.ndarray) -> float:
        def hockey_stick(eps: float) -> float:
            excess = losses - eps
            mask = excess > 0
            if not mask.any():
                return 0.0
            return float(np.sum(-np.expm1(-excess[mask]))) / len(losses)

        lo, hi = 0.0, float(losses.max())
        if hockey_stick(lo) <= delta:
            return 0.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if hockey_stick(mid) > delta:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    return max(eps_for(loss_with), eps_for(loss_without))


def bound_curve(epsilons, kappa: float, q: float, steps: int,
                delta: float) -> list[dict]:
    """Worst-case and relaxed bounds over a grid of target budgets.

    For each target epsilon a noise multiplier is calibrated, and both
    bounds are evaluated on its composed curve. Rows come back sorted by
    epsilon; both bound columns are monotone nondecreasing.
    """
    if not epsilons:
        raise ParameterError("epsilon grid must be nonempty")
    rows = []
    for eps in sorted(epsilons):
        sigma = accountant.calibrate_sigma(eps, delta, q, steps)
        privacy = PrivacyParams(noise_multiplier=sigma, clip_norm=1.0,
                                sampling_rate=q, steps=steps, delta=delta)
        params = ReroParams(privacy=privacy, prior=kappa)
        wc = worst_case_bound(params)
        rel = relaxed_bound(params)
        rows.append({"epsilon": eps, "sigma": sigma,
                     "worst_case": wc.gamma, "relaxed": rel.gamma,
                     "minimizing_order": wc.minimizing_order})
    return rows
