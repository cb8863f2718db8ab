"""
Exact Engine
Evolves the diagonal m_t of the rotated iterate covariance under constant-step
mini-batch SGD and integrates it into pointwise and tail-averaged risks.

For batch size b the diagonal obeys

    m_{t+1} = [I - 2 eta Lambda + eta^2 (1 + 1/b) Lambda^2 + (eta^2 / b) lambda lambda^T] m_t
              + (eta^2 / b) sigma^2 lambda

which is applied here in O(d) per step (the rank-one term is lambda * <lambda, m>).
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np

from src.problem import ProblemSpec, TailWindow
from src.utils.errors import InvalidArgumentError, StabilityViolationError
from src.utils.numerics import geometric_tail_sum, one_minus_power, pairwise_dot

logger = logging.getLogger(__name__)

PARTS = ("total", "bias", "variance")


@dataclass(frozen=True, eq=False)
class StateVector:
    """Diagonal m of Q^T Sigma_t Q at iteration t"""
    m: np.ndarray
    t: int

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        if m.ndim != 1:
            raise InvalidArgumentError("state vector must be 1-d")
        if np.any(m < 0):
            raise InvalidArgumentError("state vector must be elementwise >= 0")
        if self.t < 0:
            raise InvalidArgumentError(f"iteration index must be >= 0, got {self.t}")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)


@dataclass(frozen=True, eq=False)
class SplitState:
    """Bias track (noiseless, from m0_bias) and variance track (from zero, full noise)"""
    bias: StateVector
    variance: StateVector

    @property
    def total(self) -> np.ndarray:
        return self.bias.m + self.variance.m


@dataclass(frozen=True)
class RecursionCoefficients:
    """Scalar coefficients of the batch-b diagonal recursion"""
    linear: float        # 2 eta
    quadratic: float     # eta^2 (1 + 1/b)
    rank_one: float      # eta^2 / b
    noise_scale: float   # eta^2 / b, multiplies sigma^2 lambda

    @classmethod
    def from_spec(cls, spec: ProblemSpec) -> "RecursionCoefficients":
        eta, b = spec.eta, spec.batch
        return cls(
            linear=2.0 * eta,
            quadratic=eta * eta * (1.0 + 1.0 / b),
            rank_one=eta * eta / b,
            noise_scale=eta * eta / b,
        )

    def perturbed(self, relative: float = 0.01) -> "RecursionCoefficients":
        """Copy with the quadratic coefficient scaled by (1 + relative); negative control only"""
        return replace(self, quadratic=self.quadratic * (1.0 + relative))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Dense split trajectory for t = 0 ... T

    bias[t] and variance[t] are the two tracks as (T+1, d) arrays; states
    exposes them as SplitState objects.
    """
    spec: ProblemSpec
    bias: np.ndarray
    variance: np.ndarray

    @property
    def T(self) -> int:
        return int(self.bias.shape[0]) - 1

    @property
    def total(self) -> np.ndarray:
        return self.bias + self.variance

    def track(self, part: str = "total") -> np.ndarray:
        if part == "total":
            return self.total
        if part == "bias":
            return self.bias
        if part == "variance":
            return self.variance
        raise InvalidArgumentError(f"unknown part '{part}', expected one of {PARTS}")

    def state(self, t: int) -> SplitState:
        return SplitState(bias=StateVector(self.bias[t], t), variance=StateVector(self.variance[t], t))

    @property
    def states(self) -> List[SplitState]:
        return [self.state(t) for t in range(self.T + 1)]


@dataclass(frozen=True, eq=False)
class TransitionOperators:
    """Dense d x d transition matrices: exact batch-b operator, its bound B and the diagonal D"""
    A_exact: np.ndarray
    B: np.ndarray
    D: np.ndarray


def _step(m: np.ndarray, lam: np.ndarray, lam2: np.ndarray, c: RecursionCoefficients,
          injection: np.ndarray) -> np.ndarray:
    coupling = c.rank_one * float(np.sum(lam * m))
    return m - c.linear * lam * m + c.quadratic * lam2 * m + coupling * lam + injection


def step_m(m: StateVector, spec: ProblemSpec,
           coefficients: Optional[RecursionCoefficients] = None) -> StateVector:
    """
    One application of the batch-b recursion

    Args:
        m: Current diagonal state
        spec: Problem (spectrum, eta, batch, sigma2)
        coefficients: Override of the recursion coefficients

    Returns:
        State at t + 1
    """
    if m.m.shape != (spec.d,):
        raise InvalidArgumentError(f"state has shape {m.m.shape}, spec has d={spec.d}")
    c = coefficients or RecursionCoefficients.from_spec(spec)
    lam = spec.lambdas
    nxt = _step(m.m, lam, lam * lam, c, c.noise_scale * spec.sigma2 * lam)
    return StateVector(nxt, m.t + 1)


def evolve(spec: ProblemSpec, T: int, m0: Optional[np.ndarray] = None, sigma2: Optional[float] = None,
           coefficients: Optional[RecursionCoefficients] = None) -> np.ndarray:
    """
    Unsplit evolution of the diagonal recursion

    Args:
        spec: Problem
        T: Number of steps
        m0: Starting diagonal (defaults to spec.m0_bias)
        sigma2: Noise level override (defaults to spec.sigma2)
        coefficients: Override of the recursion coefficients

    Returns:
        Array of shape (T+1, d) with row t equal to m_t
    """
    if int(T) != T or T < 0:
        raise InvalidArgumentError(f"T must be a non-negative integer, got {T}")
    T = int(T)
    lam = spec.lambdas
    lam2 = lam * lam
    c = coefficients or RecursionCoefficients.from_spec(spec)
    noise = spec.sigma2 if sigma2 is None else float(sigma2)
    injection = c.noise_scale * noise * lam

    start = spec.m0_bias if m0 is None else np.asarray(m0, dtype=float)
    if start.shape != (spec.d,):
        raise InvalidArgumentError(f"m0 has shape {start.shape}, spec has d={spec.d}")

    out = np.empty((T + 1, spec.d))
    out[0] = start
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            out[t + 1] = _step(out[t], lam, lam2, c, injection)
    return out


def evolve_split(spec: ProblemSpec, T: int,
                 coefficients: Optional[RecursionCoefficients] = None) -> Trajectory:
    """
    Evolve the bias track (from m0_bias, sigma^2 = 0) and the variance track (from 0, full sigma^2)

    Args:
        spec: Problem
        T: Number of steps
        coefficients: Override of the recursion coefficients

    Returns:
        Trajectory with T + 1 states
    """
    if not spec.stable:
        logger.warning("⚠️ eta=%.6g exceeds the stable step size %.6g; the trajectory may diverge",
                       spec.eta, spec.max_stable_lr)
    logger.debug("🔄 Evolving d=%d, T=%d, b=%d", spec.d, T, spec.batch)
    bias = evolve(spec, T, m0=spec.m0_bias, sigma2=0.0, coefficients=coefficients)
    variance = evolve(spec, T, m0=np.zeros(spec.d), coefficients=coefficients)
    return Trajectory(spec=spec, bias=bias, variance=variance)


def excess_risk_of_m(m, spec: ProblemSpec) -> float:
    """Excess risk 1/2 <lambda, m>"""
    vec = m.m if isinstance(m, StateVector) else np.asarray(m, dtype=float)
    if vec.shape != (spec.d,):
        raise InvalidArgumentError(f"state has shape {vec.shape}, spec has d={spec.d}")
    return 0.5 * pairwise_dot(spec.lambdas, vec)


def risk_of_m(m, spec: ProblemSpec) -> float:
    """Population risk 1/2 <lambda, m> + sigma^2 / 2"""
    return excess_risk_of_m(m, spec) + 0.5 * spec.sigma2


def pointwise_risks(traj: Trajectory) -> Dict[str, np.ndarray]:
    """Excess risk of every iterate, total and per track"""
    lam = traj.spec.lambdas
    bias_excess = 0.5 * np.sum(traj.bias * lam, axis=1)
    variance_excess = 0.5 * np.sum(traj.variance * lam, axis=1)
    return {
        "excess_risk": 0.5 * np.sum(traj.total * lam, axis=1),
        "bias_excess": bias_excess,
        "variance_excess": variance_excess,
    }


def _window_rows(traj: Trajectory, window: TailWindow, part: str) -> np.ndarray:
    if traj.T < window.last:
        raise InvalidArgumentError(
            f"trajectory ends at t={traj.T} but the window needs t={window.last}"
        )
    return traj.track(part)[window.s:window.end]


def tail_excess_exact(traj: Trajectory, window: TailWindow, part: str = "total") -> float:
    """
    Exact excess risk of the tail average over iterates s ... s+N-1

    Uses E[delta_j delta_i^T] = (I - eta H)^{j-i} Sigma_i for j >= i, so each
    iterate i carries the weight 1 + 2 g_k(s+N-1-i) per eigen-direction with
    g_k(n) = sum_{r=1}^{n} (1 - eta lambda_k)^r.

    Args:
        traj: Split trajectory reaching at least t = s+N-1
        window: Tail window
        part: "total", "bias" or "variance"

    Returns:
        (1 / (2 N^2)) sum_k lambda_k sum_i m_i^k (1 + 2 g_k(s+N-1-i))
    """
    rows = _window_rows(traj, window, part)
    spec = traj.spec
    rate = spec.eta * spec.lambdas
    N = window.N
    acc = np.zeros(spec.d)
    for offset in range(N):
        acc += rows[offset] * (1.0 + 2.0 * geometric_tail_sum(rate, N - 1 - offset))
    return pairwise_dot(spec.lambdas, acc) / (2.0 * N * N)


def tail_risk_exact(traj: Trajectory, window: TailWindow, part: str = "total") -> float:
    """Exact risk of the tail average: tail_excess_exact + sigma^2 / 2"""
    return tail_excess_exact(traj, window, part) + 0.5 * traj.spec.sigma2


def _require_stable(spec: ProblemSpec, what: str) -> None:
    if not spec.stable:
        raise StabilityViolationError(
            f"{what} requires eta <= {spec.max_stable_lr:.6g}, got eta={spec.eta:.6g}",
            eta=spec.eta,
            max_stable_lr=spec.max_stable_lr,
        )


def tail_bound_excess(traj: Trajectory, window: TailWindow, part: str = "total") -> float:
    """Upper-bound expression (1 / (eta N^2)) <sum_i m_i, 1 - (1 - eta lambda)^N> without the noise floor"""
    spec = traj.spec
    _require_stable(spec, "the tail-averaged upper bound")
    rows = _window_rows(traj, window, part)
    N = window.N
    summed = np.sum(rows, axis=0)
    return pairwise_dot(summed, one_minus_power(spec.eta * spec.lambdas, N)) / (spec.eta * N * N)


def tail_risk_upper_bound(traj: Trajectory, window: TailWindow, part: str = "total") -> float:
    """
    Upper bound on the tail-averaged risk

    Args:
        traj: Split trajectory reaching at least t = s+N-1
        window: Tail window
        part: "total", "bias" or "variance"

    Returns:
        (1 / (eta N^2)) <sum_i m_i, 1 - (1 - eta lambda)^N> + sigma^2 / 2
    """
    return tail_bound_excess(traj, window, part) + 0.5 * traj.spec.sigma2


def build_operators(spec: ProblemSpec) -> TransitionOperators:
    """
    Dense transition operators

    A_exact = I - 2 eta Lambda + eta^2 (1 + 1/b) Lambda^2 + (eta^2 / b) lambda lambda^T,
    B = (I - eta Lambda)^2 + alpha eta^2 lambda lambda^T with alpha = 2 / b,
    D = (I - eta Lambda)^2.
    """
    c = RecursionCoefficients.from_spec(spec)
    lam = spec.lambdas
    outer = np.outer(lam, lam)
    D = np.diag((1.0 - spec.eta * lam) ** 2)
    A_exact = np.diag(1.0 - c.linear * lam + c.quadratic * lam * lam) + c.rank_one * outer
    B = D + spec.alpha * spec.eta * spec.eta * outer
    return TransitionOperators(A_exact=A_exact, B=B, D=D)


def variance_fixed_point(spec: ProblemSpec) -> np.ndarray:
    """
    Limit of the variance track, (eta^2 sigma^2 / b) (I - A_exact)^{-1} lambda

    I - A_exact is diagonal minus rank one, so the solve is closed form
    (Sherman-Morrison). Zero eigen-directions receive no noise and stay at 0.

    Returns:
        Vector m_bar_infinity of length d
    """
    c = RecursionCoefficients.from_spec(spec)
    lam = spec.lambdas
    # diagonal of I - A_exact divided by lambda
    per_direction = c.linear - c.quadratic * lam
    if np.any(per_direction <= 0):
        raise StabilityViolationError("variance track has no finite fixed point at this step size",
                                      eta=spec.eta, max_stable_lr=spec.max_stable_lr)
    u = np.where(lam > 0, 1.0 / per_direction, 0.0)  # (diag part)^{-1} lambda
    mass = pairwise_dot(lam, u)
    denom = 1.0 - c.rank_one * mass
    if denom <= 0:
        raise StabilityViolationError("variance track has no finite fixed point at this step size",
                                      eta=spec.eta, max_stable_lr=spec.max_stable_lr)
    return c.noise_scale * spec.sigma2 * u / denom
