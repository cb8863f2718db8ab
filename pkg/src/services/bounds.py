"""
Bounds
Closed-form upper bounds on the tail-averaged bias and variance risk, the
per-iterate bounds, the bias-mass certificates and a lower-bound diagnostic.

All bounds assume eta <= 1 / (lambda_max + alpha * Tr(H)); every function here
refuses unstable specs with StabilityViolationError.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.problem import ProblemSpec, TailWindow, Thresholds, band_masks, thresholds
from src.services.exact_engine import evolve
from src.utils.errors import InvalidArgumentError, SingularSpectrumError, StabilityViolationError
from src.utils.numerics import contraction_power, one_minus_power, pairwise_dot

logger = logging.getLogger(__name__)


def _require_stable(spec: ProblemSpec) -> None:
    if not spec.stable:
        raise StabilityViolationError(
            f"bounds require eta <= {spec.max_stable_lr:.6g}, got eta={spec.eta:.6g}",
            eta=spec.eta,
            max_stable_lr=spec.max_stable_lr,
        )


def _require_step(t: int) -> int:
    if int(t) != t or t < 0:
        raise InvalidArgumentError(f"t must be a non-negative integer, got {t}")
    return int(t)


def _masked_sum(values: np.ndarray, mask: np.ndarray) -> float:
    return float(np.sum(np.where(mask, values, 0.0)))


@dataclass(frozen=True)
class BiasBoundReport:
    """Three summands of the tail-averaged bias bound"""
    term_head: float
    term_tail: float
    term_cross: float
    total: float
    k_star: int
    k_dagger: int
    stable: bool

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class VarianceBoundReport:
    """Three-band variance bound; total = prefactor * (band_head + band_mid + band_tail)"""
    band_head: float
    band_mid: float
    band_tail: float
    prefactor: float
    total: float
    batch_scaled_total: float
    k_star: int
    k_dagger: int
    stable: bool

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class LowerBoundReport:
    """Lower-bound expressions with every suppressed constant set to 1"""
    bias_lb: float
    variance_lb: float
    k_star: int
    k_dagger: int
    stable: bool
    diagnostic_only: bool = True

    @property
    def total(self) -> float:
        return self.bias_lb + self.variance_lb

    def to_dict(self) -> Dict[str, Any]:
        body = asdict(self)
        body["total"] = self.total
        return body


@dataclass(frozen=True)
class SharpnessReport:
    """How far the upper bound sits above the lower-bound diagnostic"""
    upper_total: float
    lower_total: float
    ratio: float
    cross_identity_share: float
    fitted_constant: Optional[float]
    exact_excess: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def bias_risk_bound(spec: ProblemSpec, window: TailWindow) -> BiasBoundReport:
    """
    Upper bound on the bias part of the tail-averaged excess risk

    With omega_j = (1 - eta lambda_j)^{2s} m0_j:

        term_head  = (1 / (eta^2 N^2)) sum_{j <= k*} omega_j / lambda_j
        term_tail  = 4 sum_{j > k*} omega_j lambda_j
        term_cross = alpha (sum_{j <= k*} m0_j + 2 (s+N) eta sum_{j > k*} m0_j lambda_j)
                     / (eta N (1 - eta alpha Tr H)) * (k* + 4 eta^2 N^2 sum_{j > k*} lambda_j^2) / N

    Args:
        spec: Stable problem
        window: Tail window (s, N)

    Returns:
        BiasBoundReport
    """
    _require_stable(spec)
    th = thresholds(spec.spectrum, spec.eta, window)
    head, _, _ = band_masks(spec.d, th)
    rest = ~head

    lam = spec.lambdas
    m0 = spec.m0_bias
    eta, N, s = spec.eta, window.N, window.s
    omega = contraction_power(eta * lam, 2 * s) * m0

    # head-band eigenvalues are >= 1/(eta N) > 0
    if np.any(lam[head] <= 0):
        raise SingularSpectrumError("head band contains a zero eigenvalue")
    inv_lam = np.where(head, 1.0 / np.where(head, lam, 1.0), 0.0)

    term_head = pairwise_dot(omega, inv_lam) / (eta * eta * N * N)
    term_tail = 4.0 * _masked_sum(omega * lam, rest)

    head_mass = _masked_sum(m0, head)
    tail_weighted = _masked_sum(m0 * lam, rest)
    tail_square = _masked_sum(lam * lam, rest)
    front = spec.alpha * (head_mass + 2.0 * window.end * eta * tail_weighted)
    front /= eta * N * (1.0 - spec.coupling)
    term_cross = front * (th.k_star + 4.0 * eta * eta * N * N * tail_square) / N

    return BiasBoundReport(
        term_head=term_head,
        term_tail=term_tail,
        term_cross=term_cross,
        total=term_head + term_tail + term_cross,
        k_star=th.k_star,
        k_dagger=th.k_dagger,
        stable=spec.stable,
    )


def variance_risk_bound(spec: ProblemSpec, window: TailWindow) -> VarianceBoundReport:
    """
    Upper bound on the variance part of the tail-averaged excess risk

    sigma^2 / (1 - eta alpha Tr H) * (k*/N + 4 eta sum_{k* < j <= k-dagger} lambda_j
                                      + 16 eta^2 (s+N) sum_{j > k-dagger} lambda_j)

    Args:
        spec: Stable problem
        window: Tail window (s, N)

    Returns:
        VarianceBoundReport, including total / b as batch_scaled_total
    """
    _require_stable(spec)
    th = thresholds(spec.spectrum, spec.eta, window)
    _, mid, tail = band_masks(spec.d, th)
    lam = spec.lambdas
    eta, sigma2 = spec.eta, spec.sigma2

    band_head = sigma2 * th.k_star / window.N
    band_mid = 4.0 * eta * sigma2 * _masked_sum(lam, mid)
    band_tail = 16.0 * eta * eta * window.end * sigma2 * _masked_sum(lam, tail)
    prefactor = 1.0 / (1.0 - spec.coupling)
    total = prefactor * (band_head + band_mid + band_tail)

    return VarianceBoundReport(
        band_head=band_head,
        band_mid=band_mid,
        band_tail=band_tail,
        prefactor=prefactor,
        total=total,
        batch_scaled_total=total / spec.batch,
        k_star=th.k_star,
        k_dagger=th.k_dagger,
        stable=spec.stable,
    )


def bias_iterate_bound(spec: ProblemSpec, t: int) -> np.ndarray:
    """
    Elementwise bound on the bias iterate m~_t

    D^t m0 + (alpha eta <m0, 1 - (1 - eta lambda)^{2t}> / (1 - eta alpha Tr H)) lambda
    """
    _require_stable(spec)
    t = _require_step(t)
    rate = spec.eta * spec.lambdas
    drop = pairwise_dot(spec.m0_bias, one_minus_power(rate, 2 * t))
    spill = spec.alpha * spec.eta * drop / (1.0 - spec.coupling)
    return contraction_power(rate, 2 * t) * spec.m0_bias + spill * spec.lambdas


def variance_iterate_bound(spec: ProblemSpec, t: int) -> np.ndarray:
    """Elementwise bound on the variance iterate: (eta sigma^2 / (1 - eta alpha Tr H)) (1 - (1 - eta lambda)^{2t})"""
    _require_stable(spec)
    t = _require_step(t)
    scale = spec.eta * spec.sigma2 / (1.0 - spec.coupling)
    return scale * one_minus_power(spec.eta * spec.lambdas, 2 * t)


def ct_sum_check(spec: ProblemSpec, k: int) -> Tuple[float, float]:
    """
    Both sides of the coupling-sum certificate on the exact bias track

    c_t = alpha eta^2 <lambda, m~_{t-1}> with c_0 = 0, and s_t = <m~_t, 1>.

    Returns:
        (sum_{t=0}^{k-1} c_t, alpha eta (s_0 - s_k) / (1 - eta alpha Tr H))
    """
    _require_stable(spec)
    k = _require_step(k)
    bias = evolve(spec, k, m0=spec.m0_bias, sigma2=0.0)
    c_scale = spec.alpha * spec.eta * spec.eta
    # c_1 ... c_{k-1} read m~_0 ... m~_{k-2}
    if k >= 2:
        lhs = c_scale * float(np.sum(bias[:k - 1] * spec.lambdas))
    else:
        lhs = 0.0
    mass_drop = float(np.sum(bias[0]) - np.sum(bias[k]))
    rhs = spec.alpha * spec.eta * mass_drop / (1.0 - spec.coupling)
    return lhs, rhs


def mass_drop_check(spec: ProblemSpec, t: int) -> Tuple[float, float]:
    """
    Both sides of the bias-mass decrease bound

    Returns:
        (s_0 - s_t, <m0, 1 - (1 - eta lambda)^{2t}>)
    """
    _require_stable(spec)
    t = _require_step(t)
    bias = evolve(spec, t, m0=spec.m0_bias, sigma2=0.0)
    lhs = float(np.sum(bias[0] - bias[t]))
    rhs = pairwise_dot(spec.m0_bias, one_minus_power(spec.eta * spec.lambdas, 2 * t))
    return lhs, rhs


def lower_bound_diagnostic(spec: ProblemSpec, window: TailWindow) -> LowerBoundReport:
    """
    Leading-order lower bounds with all constants set to 1 (report only)

    bias_lb     = (1/(eta^2 N^2)) sum_{j <= k*} omega_j / lambda_j + sum_{j > k*} omega_j lambda_j
                  + (sum_{j > k-dagger} m0_j lambda_j) (k*/N + N eta^2 sum_{j > k*} lambda_j^2)
    variance_lb = sigma^2 (k*/N + eta sum_{k* < j <= k-dagger} lambda_j
                  + (s+N) eta^2 sum_{j > k-dagger} lambda_j^2)
    """
    _require_stable(spec)
    th = thresholds(spec.spectrum, spec.eta, window)
    head, mid, tail = band_masks(spec.d, th)
    rest = ~head
    lam = spec.lambdas
    m0 = spec.m0_bias
    eta, N = spec.eta, window.N
    omega = contraction_power(eta * lam, 2 * window.s) * m0
    inv_lam = np.where(head, 1.0 / np.where(head, lam, 1.0), 0.0)

    bias_lb = pairwise_dot(omega, inv_lam) / (eta * eta * N * N)
    bias_lb += _masked_sum(omega * lam, rest)
    bias_lb += _masked_sum(m0 * lam, tail) * (th.k_star / N + N * eta * eta * _masked_sum(lam * lam, rest))

    variance_lb = spec.sigma2 * (
        th.k_star / N
        + eta * _masked_sum(lam, mid)
        + window.end * eta * eta * _masked_sum(lam * lam, tail)
    )
    return LowerBoundReport(
        bias_lb=bias_lb,
        variance_lb=variance_lb,
        k_star=th.k_star,
        k_dagger=th.k_dagger,
        stable=spec.stable,
    )


def sharpness_gap(spec: ProblemSpec, window: TailWindow, exact: Optional[float] = None) -> SharpnessReport:
    """
    Compare the upper bound with the lower-bound diagnostic

    cross_identity_share is the fraction of the term_cross numerator carried by
    the unweighted head-band mass sum_{j <= k*} m0_j, a term with no lower-bound
    counterpart. fitted_constant is min(1, exact / lower_total) when the exact
    tail excess is supplied.
    """
    bias = bias_risk_bound(spec, window)
    variance = variance_risk_bound(spec, window)
    lower = lower_bound_diagnostic(spec, window)

    th = Thresholds(bias.k_star, bias.k_dagger)
    head, _, _ = band_masks(spec.d, th)
    head_mass = _masked_sum(spec.m0_bias, head)
    numerator = head_mass + 2.0 * window.end * spec.eta * _masked_sum(spec.m0_bias * spec.lambdas, ~head)
    share = head_mass / numerator if numerator > 0 else 0.0

    upper_total = bias.total + variance.total
    lower_total = lower.total
    ratio = upper_total / lower_total if lower_total > 0 else float("inf")
    fitted = None
    if exact is not None and lower_total > 0:
        fitted = min(1.0, float(exact) / lower_total)

    logger.debug("🧪 upper=%.6g lower=%.6g ratio=%.6g", upper_total, lower_total, ratio)
    return SharpnessReport(
        upper_total=upper_total,
        lower_total=lower_total,
        ratio=ratio,
        cross_identity_share=share,
        fitted_constant=fitted,
        exact_excess=None if exact is None else float(exact),
    )
