"""
Oracles
Brute-force instruments that check the diagonal reduction independently of the
exact engine: the full d x d covariance recursion, the Gaussian fourth-moment
identity by sampling, operator dominance and the resolvent bound.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy import stats

from src.problem import ProblemSpec, Spectrum
from src.services.exact_engine import build_operators
from src.services.mc_sim import make_rng
from src.utils.errors import InvalidArgumentError, StabilityViolationError
from src.utils.export import append_jsonl, utc_timestamp

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-10
ISSERLIS_CHUNK = 65536
MIN_ISSERLIS_SAMPLES = 10_000


def _matrix_scale(M: np.ndarray) -> float:
    return float(np.max(np.abs(M))) if M.size else 0.0


def _check_psd(M: np.ndarray, name: str) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidArgumentError(f"{name} must be a square matrix, got shape {M.shape}")
    scale = _matrix_scale(M)
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12 * max(scale, 1.0)):
        raise InvalidArgumentError(f"{name} must be symmetric")
    if scale > 0 and np.min(scipy.linalg.eigvalsh(M)) < -PSD_TOLERANCE * scale:
        raise InvalidArgumentError(f"{name} must be positive semi-definite")


@dataclass(frozen=True, eq=False)
class FullState:
    """Full rotated covariance M_t = Q^T Sigma_t Q"""
    M: np.ndarray
    t: int = 0

    def __post_init__(self):
        M = np.array(self.M, dtype=float)
        _check_psd(M, "M")
        M.setflags(write=False)
        object.__setattr__(self, "M", M)

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.M).copy()


def _full_step(M: np.ndarray, spec: ProblemSpec) -> np.ndarray:
    lam = spec.lambdas
    eta, b = spec.eta, spec.batch
    lam_M = lam[:, None] * M
    M_lam = M * lam[None, :]
    sandwich = lam[:, None] * M * lam[None, :]
    trace_term = float(np.sum(lam * np.diag(M)))
    return (
        M
        - eta * (M_lam + lam_M)
        + eta * eta * (1.0 + 1.0 / b) * sandwich
        + (eta * eta / b) * (trace_term + spec.sigma2) * np.diag(lam)
    )


def full_matrix_step(state: FullState, spec: ProblemSpec) -> FullState:
    """
    One step of the full matrix recursion

    M' = M - eta (M Lambda + Lambda M) + eta^2 (1 + 1/b) Lambda M Lambda
         + (eta^2 / b) Tr(Lambda M) Lambda + (eta^2 / b) sigma^2 Lambda
    """
    if state.M.shape != (spec.d, spec.d):
        raise InvalidArgumentError(f"state is {state.M.shape}, spec has d={spec.d}")
    return FullState(_full_step(state.M, spec), state.t + 1)


def full_matrix_evolve(M0: np.ndarray, spec: ProblemSpec, T: int) -> Tuple[np.ndarray, float]:
    """
    Evolve the full recursion from M0

    Args:
        M0: Symmetric PSD starting matrix
        spec: Problem
        T: Number of steps

    Returns:
        (diagonals of shape (T+1, d), smallest lambda_min(M_t) / max|M_t| seen along the way)
    """
    M = FullState(M0).M
    if M.shape != (spec.d, spec.d):
        raise InvalidArgumentError(f"M0 is {M.shape}, spec has d={spec.d}")
    if int(T) != T or T < 0:
        raise InvalidArgumentError(f"T must be a non-negative integer, got {T}")

    diagonals = np.empty((int(T) + 1, spec.d))
    diagonals[0] = np.diag(M)
    worst = 0.0
    for t in range(int(T)):
        M = _full_step(M, spec)
        M = 0.5 * (M + M.T)
        diagonals[t + 1] = np.diag(M)
        scale = _matrix_scale(M)
        if scale > 0:
            worst = min(worst, float(np.min(scipy.linalg.eigvalsh(M))) / scale)
    return diagonals, worst


def diagonal_closure_check(spec: ProblemSpec, M: np.ndarray, seed: int = 0) -> float:
    """
    Relative change of the stepped diagonal when the off-diagonal part of M is perturbed

    Returns:
        max |diag(step(M + P)) - diag(step(M))| / max(|diag(step(M))|, 1)
    """
    M = np.asarray(M, dtype=float)
    if M.shape != (spec.d, spec.d):
        raise InvalidArgumentError(f"M is {M.shape}, spec has d={spec.d}")
    rng = make_rng(seed)
    P = rng.standard_normal((spec.d, spec.d)) * max(_matrix_scale(M), 1.0)
    P = P + P.T
    np.fill_diagonal(P, 0.0)
    base = np.diag(_full_step(M, spec))
    moved = np.diag(_full_step(M + P, spec))
    return float(np.max(np.abs(moved - base)) / max(float(np.max(np.abs(base))), 1.0))


def isserlis_check(spectrum: Spectrum, Sigma: np.ndarray, n_samples: int,
                   seed: int = 0) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Sample E[(x^T Sigma x) x x^T] for x ~ N(0, diag(lambda)) against 2 H Sigma H + Tr(H Sigma) H

    Args:
        spectrum: Eigenvalues (H = diag(lambda))
        Sigma: Symmetric PSD d x d matrix
        n_samples: Number of draws (>= 10^4)
        seed: Stream seed

    Returns:
        (analytic, empirical, max entrywise error relative to max|analytic|)
    """
    Sigma = np.asarray(Sigma, dtype=float)
    d = spectrum.d
    if Sigma.shape != (d, d):
        raise InvalidArgumentError(f"Sigma is {Sigma.shape}, spectrum has d={d}")
    _check_psd(Sigma, "Sigma")
    if int(n_samples) != n_samples or n_samples < MIN_ISSERLIS_SAMPLES:
        raise InvalidArgumentError(f"n_samples must be >= {MIN_ISSERLIS_SAMPLES}, got {n_samples}")

    lam = spectrum.lambdas
    H_Sigma_H = lam[:, None] * Sigma * lam[None, :]
    analytic = 2.0 * H_Sigma_H + float(np.sum(lam * np.diag(Sigma))) * np.diag(lam)

    rng = make_rng(seed)
    root_lam = np.sqrt(lam)
    acc = np.zeros((d, d))
    remaining = int(n_samples)
    while remaining > 0:
        count = min(ISSERLIS_CHUNK, remaining)
        x = rng.standard_normal((count, d)) * root_lam
        quad = np.einsum("ni,ij,nj->n", x, Sigma, x)
        acc += np.einsum("n,ni,nj->ij", quad, x, x)
        remaining -= count
    empirical = acc / int(n_samples)

    scale = _matrix_scale(analytic)
    diff = _matrix_scale(empirical - analytic)
    max_rel_err = diff / scale if scale > 0 else diff
    return analytic, empirical, max_rel_err


def isserlis_convergence(spectrum: Spectrum, Sigma: np.ndarray, ns: Sequence[int] = (10_000, 100_000, 1_000_000),
                         seed: int = 0, replicates: int = 5) -> Tuple[np.ndarray, float]:
    """
    Mean relative error of isserlis_check at each sample size and its log-log slope

    Returns:
        (errors per n, slope of log(error) against log(n)); close to -0.5 at the Monte Carlo rate
    """
    if len(ns) < 2:
        raise InvalidArgumentError("need at least two sample sizes")
    if replicates < 1:
        raise InvalidArgumentError(f"replicates must be >= 1, got {replicates}")
    errors = np.empty(len(ns))
    stream = seed
    for i, n in enumerate(ns):
        runs = []
        for _ in range(replicates):
            runs.append(isserlis_check(spectrum, Sigma, n, stream)[2])
            stream += 1
        errors[i] = np.mean(runs)
    fit = stats.linregress(np.log(np.asarray(ns, dtype=float)), np.log(errors))
    logger.debug("🧪 Isserlis errors %s, slope %.3f", errors, fit.slope)
    return errors, float(fit.slope)


def dominance_violation(spec: ProblemSpec, n_vectors: int = 100, seed: int = 0) -> float:
    """
    Largest excess of A_exact over B, entrywise and on random non-negative vectors

    A_exact and B share their diagonal exactly, so a tolerance of a few ulps is
    allowed. Returns 0.0 when A_exact <= B holds.
    """
    ops = build_operators(spec)
    A, B = ops.A_exact, ops.B
    ulp = 8.0 * np.finfo(float).eps
    tol = ulp * max(1.0, _matrix_scale(B))
    worst = max(0.0, float(np.max(A - B)) - tol)

    rng = make_rng(seed)
    V = rng.uniform(0.0, 1.0, size=(n_vectors, spec.d))
    Av, Bv = V @ A.T, V @ B.T
    vec_tol = ulp * spec.d * max(1.0, float(np.max(np.abs(Bv))))
    worst = max(worst, float(np.max(Av - Bv)) - vec_tol)
    return max(worst, 0.0)


def dominance_check(spec: ProblemSpec, n_vectors: int = 100, seed: int = 0) -> bool:
    """True iff A_exact <= B entrywise and A_exact v <= B v for random v >= 0"""
    return dominance_violation(spec, n_vectors, seed) == 0.0


def resolvent_bound_check(spec: ProblemSpec) -> Tuple[np.ndarray, np.ndarray, bool]:
    """
    Compare (I - B)^{-1} lambda with 1 / (eta (1 - eta alpha Tr H)) per coordinate

    Zero eigen-directions are decoupled in B (identity rows) and receive 0.

    Returns:
        (lhs, rhs, holds)
    """
    if not spec.stable or spec.coupling >= 1.0:
        raise StabilityViolationError(
            f"resolvent bound requires eta <= {spec.max_stable_lr:.6g}, got eta={spec.eta:.6g}",
            eta=spec.eta,
            max_stable_lr=spec.max_stable_lr,
        )
    lam = spec.lambdas
    B = build_operators(spec).B
    live = lam > 0
    lhs = np.zeros(spec.d)
    if np.any(live):
        block = np.eye(int(np.sum(live))) - B[np.ix_(live, live)]
        try:
            lhs[live] = scipy.linalg.solve(block, lam[live])
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as e:
            raise StabilityViolationError(f"I - B is singular: {e}", eta=spec.eta,
                                          max_stable_lr=spec.max_stable_lr)
    rhs = np.full(spec.d, 1.0 / (spec.eta * (1.0 - spec.coupling)))
    holds = bool(np.all(lhs <= rhs + 1e-12 * np.maximum(rhs, 1.0)))
    return lhs, rhs, holds


@dataclass
class Verdict:
    """One line of the verdict log"""
    check: str
    params_digest: str
    holds: bool
    max_violation: float
    seed: Optional[int] = None
    hard: bool = True
    generated_at: str = field(default_factory=utc_timestamp)

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


def append_verdict(path: str, verdict: Verdict) -> None:
    """Append a verdict as one JSON line"""
    append_jsonl(path, verdict.to_record())
