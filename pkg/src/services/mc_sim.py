"""
Monte Carlo SGD Simulator
Seeded mini-batch SGD on Gaussian linear regression, run in the eigenbasis of H
(H = diag(lambda)), with population risk evaluated in closed form per path.

Every seed owns a Philox stream built from SeedSequence(seed). Randomness is
drawn in fixed chunks of DRAW_CHUNK steps (inputs first, then noise), so a
path depends only on its seed, never on how seeds are grouped into blocks or
dispatched to workers.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.problem import ProblemSpec, Spectrum, TailWindow
from src.utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

RNG_ID = "numpy.random.Philox(SeedSequence(seed))"
DRAW_CHUNK = 256
SEED_BLOCK = 256


@dataclass(frozen=True, eq=False)
class FullProblem:
    """SGD problem with signed initial offset coordinates w0 - w* in the eigenbasis"""
    spectrum: Spectrum
    w_delta0: np.ndarray
    sigma2: float
    eta: float
    batch: int = 1

    def __post_init__(self):
        w = np.array(self.w_delta0, dtype=float)
        if w.shape != (self.spectrum.d,):
            raise InvalidArgumentError(f"w_delta0 must have length d={self.spectrum.d}, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidArgumentError("w_delta0 must be finite")
        if not np.isfinite(self.sigma2) or self.sigma2 < 0:
            raise InvalidArgumentError(f"sigma2 must be >= 0, got {self.sigma2}")
        if not np.isfinite(self.eta) or self.eta < 0:
            raise InvalidArgumentError(f"eta must be >= 0, got {self.eta}")
        if int(self.batch) != self.batch or self.batch < 1:
            raise InvalidArgumentError(f"batch must be a positive integer, got {self.batch}")
        w.setflags(write=False)
        object.__setattr__(self, "w_delta0", w)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "batch", int(self.batch))

    @classmethod
    def from_spec(cls, spec: ProblemSpec, signs: Optional[Sequence[float]] = None) -> "FullProblem":
        """w_delta0 = signs * sqrt(m0_bias); all signs +1 by default"""
        sign = np.ones(spec.d) if signs is None else np.sign(np.asarray(signs, dtype=float))
        if sign.shape != (spec.d,) or np.any(sign == 0):
            raise InvalidArgumentError("signs must be d non-zero values")
        return cls(spectrum=spec.spectrum, w_delta0=sign * np.sqrt(spec.m0_bias),
                   sigma2=spec.sigma2, eta=spec.eta, batch=spec.batch)

    @property
    def d(self) -> int:
        return self.spectrum.d

    @property
    def m0(self) -> np.ndarray:
        return self.w_delta0 ** 2


@dataclass(frozen=True)
class McEstimate:
    """Sample mean and standard error over seeds"""
    mean: float
    std_error: float
    n_seeds: int


@dataclass(frozen=True, eq=False)
class McRun:
    """Per-seed results of mc_run, in seed order"""
    seeds: np.ndarray
    final_excess: np.ndarray
    tail_avg_excess: np.ndarray
    estimate: McEstimate
    rng_id: str = RNG_ID


@dataclass(frozen=True, eq=False)
class MomentEstimate:
    """Per-(t, k) mean and standard error of delta_t^2 over seeds; arrays of shape (T+1, d)"""
    mean: np.ndarray
    std_error: np.ndarray
    n_seeds: int


@dataclass
class _BlockResult:
    final_excess: np.ndarray
    tail_avg_excess: np.ndarray
    sq_sum: Optional[np.ndarray] = None
    sq_sumsq: Optional[np.ndarray] = None


def make_rng(seed: int) -> np.random.Generator:
    """Independent counter-based stream for one seed"""
    if int(seed) != seed or seed < 0:
        raise InvalidArgumentError(f"seed must be a non-negative integer, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def _check_horizon(T: int, window: Optional[TailWindow]) -> int:
    if int(T) != T or T < 0:
        raise InvalidArgumentError(f"T must be a non-negative integer, got {T}")
    if window is not None and T < window.end:
        raise InvalidArgumentError(f"T={T} is shorter than the window end s+N={window.end}")
    return int(T)


def _simulate(problem: FullProblem, seeds: Sequence[int], T: int, window: Optional[TailWindow],
              keep_moments: bool) -> _BlockResult:
    """Run every seed of a block side by side; axis 0 is the seed"""
    rngs = [make_rng(seed) for seed in seeds]
    S, d, b = len(seeds), problem.d, problem.batch
    lam = problem.spectrum.lambdas
    root_lam = np.sqrt(lam)
    noise_sd = np.sqrt(problem.sigma2)
    step = problem.eta / b

    delta = np.tile(problem.w_delta0, (S, 1))
    tail_sum = np.zeros((S, d))
    sq_sum = sq_sumsq = None
    if keep_moments:
        sq_sum = np.zeros((T + 1, d))
        sq_sumsq = np.zeros((T + 1, d))

    def record(t: int) -> None:
        if keep_moments:
            sq = delta * delta
            sq_sum[t] = sq.sum(axis=0)
            sq_sumsq[t] = (sq * sq).sum(axis=0)
        if window is not None and window.s <= t <= window.last:
            tail_sum[...] += delta

    record(0)
    z = eps = None
    for t in range(T):
        offset = t % DRAW_CHUNK
        if offset == 0:
            count = min(DRAW_CHUNK, T - t)
            z = np.empty((S, count, b, d))
            eps = np.empty((S, count, b))
            for i, rng in enumerate(rngs):
                z[i] = rng.standard_normal((count, b, d))
                eps[i] = rng.standard_normal((count, b))
        x = z[:, offset] * root_lam                                   # (S, b, d)
        residual = (x * delta[:, None, :]).sum(axis=-1) + noise_sd * eps[:, offset]
        delta = delta - step * (x * residual[..., None]).sum(axis=1)
        record(t + 1)

    final_excess = 0.5 * (lam * delta * delta).sum(axis=-1)
    if window is not None:
        avg = tail_sum / window.N
        tail_excess = 0.5 * (lam * avg * avg).sum(axis=-1)
    else:
        tail_excess = np.full(S, np.nan)
    return _BlockResult(final_excess, tail_excess, sq_sum, sq_sumsq)


def _seed_blocks(base_seed: int, n_seeds: int) -> List[List[int]]:
    seeds = list(range(base_seed, base_seed + n_seeds))
    return [seeds[i:i + SEED_BLOCK] for i in range(0, n_seeds, SEED_BLOCK)]


def _run_blocks(problem: FullProblem, blocks: List[List[int]], T: int, window: Optional[TailWindow],
                keep_moments: bool, jobs: int) -> List[_BlockResult]:
    if jobs <= 1 or len(blocks) == 1:
        return [_simulate(problem, block, T, window, keep_moments) for block in blocks]
    with ProcessPoolExecutor(max_workers=jobs) as executor:
        futures = [executor.submit(_simulate, problem, block, T, window, keep_moments) for block in blocks]
        # collected in block order, not completion order
        return [future.result() for future in futures]


def _estimate(values: np.ndarray) -> McEstimate:
    n = int(values.size)
    return McEstimate(
        mean=float(np.mean(values)),
        std_error=float(np.std(values, ddof=1) / np.sqrt(n)),
        n_seeds=n,
    )


def sgd_path(problem: FullProblem, seed: int, T: int, window: TailWindow) -> Tuple[float, float]:
    """
    One SGD sample path

    Args:
        problem: Problem in the eigenbasis
        seed: Stream seed
        T: Number of SGD steps (T >= s + N)
        window: Tail-averaging window

    Returns:
        (excess risk of w_T, excess risk of the tail average over iterates s ... s+N-1)
    """
    T = _check_horizon(T, window)
    result = _simulate(problem, [seed], T, window, keep_moments=False)
    return float(result.final_excess[0]), float(result.tail_avg_excess[0])


def mc_run(problem: FullProblem, n_seeds: int, T: int, window: TailWindow, base_seed: int = 0,
           jobs: int = 1) -> McRun:
    """
    Run seeds base_seed ... base_seed + n_seeds - 1 and keep every path's risks

    Args:
        problem: Problem in the eigenbasis
        n_seeds: Number of seeds (>= 2)
        T: Number of SGD steps
        window: Tail-averaging window
        base_seed: First seed
        jobs: Worker processes; results do not depend on it

    Returns:
        McRun with per-seed arrays and the McEstimate of the tail-averaged excess risk
    """
    if int(n_seeds) != n_seeds or n_seeds < 2:
        raise InvalidArgumentError(f"n_seeds must be >= 2, got {n_seeds}")
    T = _check_horizon(T, window)
    make_rng(base_seed)
    logger.info("🔄 Monte Carlo: %d seeds, T=%d, d=%d, b=%d", n_seeds, T, problem.d, problem.batch)

    blocks = _seed_blocks(int(base_seed), int(n_seeds))
    results = _run_blocks(problem, blocks, T, window, False, jobs)
    final = np.concatenate([r.final_excess for r in results])
    tail = np.concatenate([r.tail_avg_excess for r in results])
    estimate = _estimate(tail)
    logger.info("✅ Tail-averaged excess %.6g ± %.2g", estimate.mean, estimate.std_error)
    return McRun(
        seeds=np.arange(base_seed, base_seed + n_seeds),
        final_excess=final,
        tail_avg_excess=tail,
        estimate=estimate,
    )


def mc_estimate(problem: FullProblem, n_seeds: int, T: int, window: TailWindow, base_seed: int = 0,
                jobs: int = 1) -> McEstimate:
    """Sample mean and standard error of the tail-averaged excess risk"""
    return mc_run(problem, n_seeds, T, window, base_seed, jobs).estimate


def second_moment_estimate(problem: FullProblem, n_seeds: int, T: int, base_seed: int = 0,
                           jobs: int = 1) -> MomentEstimate:
    """
    Mean and standard error of delta_t^2 per (t, k) over seeds

    The mean estimates the diagonal m_t evolved by the exact engine.
    """
    if int(n_seeds) != n_seeds or n_seeds < 2:
        raise InvalidArgumentError(f"n_seeds must be >= 2, got {n_seeds}")
    T = _check_horizon(T, None)
    make_rng(base_seed)
    blocks = _seed_blocks(int(base_seed), int(n_seeds))
    results = _run_blocks(problem, blocks, T, None, True, jobs)

    total = np.zeros((T + 1, problem.d))
    total_sq = np.zeros((T + 1, problem.d))
    for r in results:
        total += r.sq_sum
        total_sq += r.sq_sumsq
    n = int(n_seeds)
    mean = total / n
    var = np.maximum(total_sq - n * mean * mean, 0.0) / (n - 1)
    return MomentEstimate(mean=mean, std_error=np.sqrt(var / n), n_seeds=n)
