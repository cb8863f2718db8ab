"""
Validation Suite
Runs every numeric certificate on the configured grid plus seeded random
problems and returns one Verdict per check. Hard checks decide the exit code;
the sharpness diagnostic is soft and only reported.
"""

import logging
import math
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.config import GridPoint
from src.problem import ProblemSpec, TailWindow, make_spectrum, spec_from_fraction
from src.services.bounds import (
    bias_iterate_bound,
    bias_risk_bound,
    ct_sum_check,
    mass_drop_check,
    sharpness_gap,
    variance_iterate_bound,
    variance_risk_bound,
)
from src.services.exact_engine import (
    RecursionCoefficients,
    evolve,
    evolve_split,
    tail_excess_exact,
    variance_fixed_point,
)
from src.services.mc_sim import FullProblem, mc_estimate, second_moment_estimate
from src.services.oracles import (
    Verdict,
    diagonal_closure_check,
    dominance_violation,
    full_matrix_evolve,
    isserlis_convergence,
    resolvent_bound_check,
)
from src.utils.export import params_digest

logger = logging.getLogger(__name__)

DIAGONAL_RTOL = 1e-10
LINEARITY_RTOL = 1e-12
CLOSURE_RTOL = 1e-14
PSD_RTOL = 1e-10
BOUND_SLACK = 1e-12
ISSERLIS_MAX_ERR = 0.05
ISSERLIS_SLOPE = -0.5
ISSERLIS_SLOPE_TOL = 0.15
MC_SIGMAS = 3.0
MC_TAIL_FRACTION = 0.9
MC_CELL_FRACTION = 0.95
SANDWICH_WINDOWS = ((0, 10), (100, 100), (1000, 1000))
SANDWICH_FRACTIONS = (0.25, 0.5, 1.0)
SANDWICH_BATCHES = (1, 4)
SANDWICH_DIMS = (1, 2, 4, 8, 16, 32, 64)


def random_stable_spec(rng: np.random.Generator, max_d: int = 8, batches: Sequence[int] = (1, 2, 4),
                       kinds: Sequence[str] = ("power_law", "random"), max_fraction: float = 1.0) -> ProblemSpec:
    """Random stable problem with eigenvalues in (0, 1]"""
    dims = [d for d in (1, 2, 4, 8, 16, 32, 64) if d <= max_d] or [1]
    d = int(rng.choice(dims))
    kind = str(rng.choice(list(kinds)))
    if kind == "power_law":
        spectrum = make_spectrum("power_law", d, exponent=float(rng.uniform(0.5, 2.0)),
                                 scale=float(rng.uniform(0.5, 1.0)))
    else:
        spectrum = make_spectrum("random", d, low=0.0, high=1.0, seed=int(rng.integers(2 ** 31)))
    return spec_from_fraction(
        spectrum,
        eta_fraction=float(rng.uniform(0.1, max_fraction)),
        batch=int(rng.choice(list(batches))),
        sigma2=float(rng.uniform(0.0, 1.0)),
        m0_bias=rng.uniform(0.0, 1.0, size=d),
    )


def random_psd(rng: np.random.Generator, d: int) -> np.ndarray:
    G = rng.standard_normal((d, d))
    return G @ G.T / d


class ValidationSuite:
    """
    Certification run over grid points and seeded random problems

    Args:
        points: Resolved grid points from the config
        settings: The `validate` config block
        coefficients_bug: Perturb the engine's recursion coefficients (negative control)
        jobs: Worker processes for the Monte Carlo checks
    """

    def __init__(self, points: List[GridPoint], settings: Dict[str, Any], coefficients_bug: bool = False,
                 jobs: int = 1):
        self.points = points
        self.settings = settings
        self.coefficients_bug = coefficients_bug
        self.jobs = jobs
        self.seed = int(settings.get("seed", 0))
        self.n_specs = int(settings.get("n_specs", 100))
        self.max_d = int(settings.get("max_d", 8))
        self.horizon = int(settings.get("horizon", 100))
        self.oracle_max_d = int(settings.get("oracle_max_d", 64))
        self.sandwich_repeats = int(settings.get("sandwich_repeats", 12))
        self.sandwich_max_d = int(settings.get("sandwich_max_d", 64))
        self.verdicts: List[Verdict] = []

    def _coefficients(self, spec: ProblemSpec) -> Optional[RecursionCoefficients]:
        if not self.coefficients_bug:
            return None
        return RecursionCoefficients.from_spec(spec).perturbed()

    def _rng(self, salt: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, salt])

    def _random_specs(self, salt: int, count: int, max_d: Optional[int] = None, **kwargs) -> List[ProblemSpec]:
        rng = self._rng(salt)
        limit = self.max_d if max_d is None else min(max_d, self.max_d)
        return [random_stable_spec(rng, limit, **kwargs) for _ in range(count)]

    def _stable_grid_specs(self) -> List[ProblemSpec]:
        return [p.spec for p in self.points if p.spec.stable and p.spec.d <= self.oracle_max_d]

    def _record(self, check: str, params: Dict[str, Any], violation: float, holds: Optional[bool] = None,
                hard: bool = True, seed: Optional[int] = None) -> Verdict:
        violation = float(violation)
        if holds is None:
            holds = violation <= 0.0
        verdict = Verdict(
            check=check,
            params_digest=params_digest(params),
            holds=bool(holds),
            max_violation=max(violation, 0.0),
            seed=self.seed if seed is None else seed,
            hard=hard,
        )
        self.verdicts.append(verdict)
        if verdict.holds:
            logger.info("🧪 ✅ %s", check)
        elif hard:
            logger.error("❌ %s failed (max violation %.3g)", check, verdict.max_violation)
        else:
            logger.warning("⚠️ %s (diagnostic) does not hold", check)
        return verdict

    # --- exact engine against the full matrix oracle -------------------------------------------

    def check_diagonal_equivalence(self) -> Verdict:
        rng = self._rng(1)
        specs = self._stable_grid_specs() + self._random_specs(2, self.n_specs, batches=(1, 2, 4))
        worst_diag, worst_psd, worst_closure = 0.0, 0.0, 0.0
        for spec in specs:
            M0 = random_psd(rng, spec.d)
            oracle, min_eig = full_matrix_evolve(M0, spec, self.horizon)
            engine = evolve(spec, self.horizon, m0=np.diag(M0), coefficients=self._coefficients(spec))
            scale = np.maximum(np.max(np.abs(oracle), axis=1), np.finfo(float).tiny)
            rel = float(np.max(np.max(np.abs(engine - oracle), axis=1) / scale))
            worst_diag = max(worst_diag, rel)
            worst_psd = min(worst_psd, min_eig)
            worst_closure = max(worst_closure, diagonal_closure_check(spec, M0, seed=self.seed))

        params = {"n_specs": len(specs), "horizon": self.horizon, "seed": self.seed}
        self._record("psd_preservation", params, -worst_psd - PSD_RTOL)
        self._record("diagonal_closure", params, worst_closure - CLOSURE_RTOL)
        return self._record("diagonal_equivalence", params, worst_diag - DIAGONAL_RTOL)

    def check_linearity(self) -> Verdict:
        worst = 0.0
        for spec in self._random_specs(3, self.n_specs):
            coefficients = self._coefficients(spec)
            traj = evolve_split(spec, self.horizon, coefficients=coefficients)
            whole = evolve(spec, self.horizon, coefficients=coefficients)
            scale = np.maximum(np.abs(whole), np.finfo(float).tiny)
            worst = max(worst, float(np.max(np.abs(traj.total - whole) / scale)))
        return self._record("split_linearity", {"n_specs": self.n_specs, "horizon": self.horizon},
                            worst - LINEARITY_RTOL)

    # --- operator lemmas -----------------------------------------------------------------------

    def check_dominance(self) -> Verdict:
        batches = tuple(self.settings.get("batches", (1, 2, 4, 8, 64)))
        worst = 0.0
        specs = self._random_specs(4, self.n_specs, batches=batches) + self._stable_grid_specs()
        for i, spec in enumerate(specs):
            worst = max(worst, dominance_violation(spec, seed=self.seed + i))
        return self._record("operator_dominance", {"n_specs": len(specs), "batches": list(batches)}, worst)

    def check_resolvent(self) -> Verdict:
        worst = 0.0
        specs = self._random_specs(5, self.n_specs) + self._stable_grid_specs()
        for spec in specs:
            lhs, rhs, _ = resolvent_bound_check(spec)
            worst = max(worst, float(np.max(lhs - rhs)) - BOUND_SLACK * max(1.0, float(rhs[0])))
        return self._record("resolvent_bound", {"n_specs": len(specs)}, worst)

    def check_isserlis(self) -> Verdict:
        rng = self._rng(6)
        ns = [int(n) for n in self.settings.get("isserlis_ns", (10_000, 100_000, 1_000_000))]
        replicates = int(self.settings.get("isserlis_replicates", 5))
        spectrum = make_spectrum("random", 3, low=0.2, high=1.0, seed=int(rng.integers(2 ** 31)))
        Sigma = random_psd(rng, 3)
        errors, slope = isserlis_convergence(spectrum, Sigma, ns, seed=self.seed, replicates=replicates)
        violation = max(float(errors[-1]) - ISSERLIS_MAX_ERR, abs(slope - ISSERLIS_SLOPE) - ISSERLIS_SLOPE_TOL)
        return self._record("isserlis_fourth_moment", {"ns": ns, "replicates": replicates}, violation)

    # --- Monte Carlo -----------------------------------------------------------------------------

    def check_monte_carlo(self) -> Verdict:
        n_specs = int(self.settings.get("mc_specs", 10))
        n_seeds = int(self.settings.get("mc_seeds", 1000))
        T = int(self.settings.get("mc_T", 40))
        window = TailWindow(s=T // 2, N=T - T // 2)
        specs = self._random_specs(7, n_specs, max_d=4, max_fraction=0.8)

        tail_hits, cells, cell_hits, worst_z = 0, 0, 0, 0.0
        for i, spec in enumerate(specs):
            base_seed = self.seed + i * n_seeds
            coefficients = self._coefficients(spec)
            problem = FullProblem.from_spec(spec)

            estimate = mc_estimate(problem, n_seeds, T, window, base_seed=base_seed, jobs=self.jobs)
            exact = tail_excess_exact(evolve_split(spec, T, coefficients=coefficients), window)
            gap = abs(estimate.mean - exact)
            if gap <= MC_SIGMAS * estimate.std_error + BOUND_SLACK * max(1.0, exact):
                tail_hits += 1
            if estimate.std_error > 0:
                worst_z = max(worst_z, gap / estimate.std_error)

            moments = second_moment_estimate(problem, n_seeds, T, base_seed=base_seed, jobs=self.jobs)
            reference = evolve(spec, T, coefficients=coefficients)
            slack = MC_SIGMAS * moments.std_error + BOUND_SLACK * np.maximum(1.0, np.abs(reference))
            cells += reference.size
            cell_hits += int(np.count_nonzero(np.abs(moments.mean - reference) <= slack))

        params = {"n_specs": n_specs, "n_seeds": n_seeds, "T": T}
        need_tail = math.ceil(MC_TAIL_FRACTION * n_specs)
        self._record("mc_per_coordinate", params, MC_CELL_FRACTION - cell_hits / max(cells, 1),
                     holds=cell_hits >= MC_CELL_FRACTION * cells)
        return self._record("mc_tail_consistency", params, max(worst_z - MC_SIGMAS, 0.0),
                            holds=tail_hits >= need_tail)

    # --- bounds --------------------------------------------------------------------------------

    def check_iterate_bounds(self) -> Verdict:
        worst_bias, worst_var = 0.0, 0.0
        for spec in self._random_specs(8, self.n_specs) + self._stable_grid_specs():
            traj = evolve_split(spec, self.horizon, coefficients=self._coefficients(spec))
            for t in range(self.horizon + 1):
                upper = bias_iterate_bound(spec, t)
                slack = BOUND_SLACK * np.maximum(1.0, upper)
                worst_bias = max(worst_bias, float(np.max(traj.bias[t] - upper - slack)))
                upper = variance_iterate_bound(spec, t)
                slack = BOUND_SLACK * np.maximum(1.0, upper)
                worst_var = max(worst_var, float(np.max(traj.variance[t] - upper - slack)))
        params = {"n_specs": self.n_specs, "horizon": self.horizon}
        self._record("bias_iterate_bound", params, worst_bias)
        return self._record("variance_iterate_bound", params, worst_var)

    def check_mass_certificates(self) -> Verdict:
        worst_ct, worst_mass = 0.0, 0.0
        for spec in self._random_specs(9, self.n_specs):
            for k in (1, 2, self.horizon):
                lhs, rhs = ct_sum_check(spec, k)
                worst_ct = max(worst_ct, lhs - rhs - BOUND_SLACK * max(1.0, rhs))
                lhs, rhs = mass_drop_check(spec, k)
                worst_mass = max(worst_mass, lhs - rhs - BOUND_SLACK * max(1.0, rhs))
        params = {"n_specs": self.n_specs, "horizon": self.horizon}
        self._record("coupling_sum_bound", params, worst_ct)
        return self._record("mass_drop_bound", params, worst_mass)

    def _sandwich_margin(self, spec: ProblemSpec, window: TailWindow) -> float:
        traj = evolve_split(spec, window.last, coefficients=self._coefficients(spec))
        exact = tail_excess_exact(traj, window)
        upper = bias_risk_bound(spec, window).total + variance_risk_bound(spec, window).total
        return exact - upper - BOUND_SLACK

    def check_sandwich(self) -> Verdict:
        rng = self._rng(10)
        dims = [d for d in SANDWICH_DIMS if d <= self.sandwich_max_d] or [1]
        worst = -math.inf
        count = 0
        for s, N in SANDWICH_WINDOWS:
            window = TailWindow(s, N)
            for fraction in SANDWICH_FRACTIONS:
                for batch in SANDWICH_BATCHES:
                    for _ in range(self.sandwich_repeats):
                        d = int(rng.choice(dims))
                        spectrum = make_spectrum("power_law", d, exponent=float(rng.uniform(0.5, 2.0)))
                        spec = spec_from_fraction(spectrum, fraction, batch=batch,
                                                  sigma2=float(rng.uniform(0.0, 1.0)),
                                                  m0_bias=rng.uniform(0.0, 1.0, size=d))
                        worst = max(worst, self._sandwich_margin(spec, window))
                        count += 1
        for point in self.points:
            if point.spec.stable:
                worst = max(worst, self._sandwich_margin(point.spec, point.window))
                count += 1
        return self._record("risk_sandwich", {"n_points": count}, max(worst, 0.0))

    def check_batch_scaling(self) -> Verdict:
        batches = [int(b) for b in self.settings.get("batches", (1, 2, 4, 8, 64))]
        finite = [p.spec for p in self.points if np.isfinite(p.spec.max_stable_lr)]
        base = finite[0] if finite else self._random_specs(11, 1)[0]
        # fixed eta, stable for every batch size (b = 1 is the strictest)
        eta = 0.5 * base.with_(batch=1).max_stable_lr

        def fixed_point_excess(b: int) -> float:
            spec = base.with_(batch=b, eta=eta, sigma2=1.0)
            return float(np.sum(spec.lambdas * variance_fixed_point(spec)))

        reference = fixed_point_excess(1)
        excess = [fixed_point_excess(b) for b in batches]
        decreasing = all(later < earlier for earlier, later in zip(excess, excess[1:]))
        violation = max([0.0] + [later - earlier for earlier, later in zip(excess, excess[1:])])
        if reference > 0:
            for b, value in zip(batches, excess):
                ratio = value / reference
                violation = max(violation, 1.0 / (2 * b) - ratio, ratio - 2.0 / b)
        holds = decreasing and violation <= 0.0
        return self._record("batch_scaling", {"batches": batches, "eta": eta}, violation, holds=holds)

    def check_sharpness(self) -> Optional[Verdict]:
        verdict = None
        for point in self.points:
            if not point.spec.stable:
                continue
            traj = evolve_split(point.spec, point.window.last)
            report = sharpness_gap(point.spec, point.window, exact=tail_excess_exact(traj, point.window))
            verdict = self._record(
                "lower_bound_sharpness",
                {"spec": point.spec.describe(), "s": point.window.s, "N": point.window.N},
                report.lower_total - report.upper_total,
                hard=False,
            )
        return verdict

    def run(self) -> List[Verdict]:
        """Run every check in a fixed order"""
        logger.info("🔄 Running validation suite on %d grid point(s)", len(self.points))
        self.verdicts = []
        self.check_diagonal_equivalence()
        self.check_linearity()
        self.check_dominance()
        self.check_resolvent()
        self.check_isserlis()
        self.check_monte_carlo()
        self.check_iterate_bounds()
        self.check_mass_certificates()
        self.check_sandwich()
        self.check_batch_scaling()
        self.check_sharpness()
        failed = [v for v in self.verdicts if v.hard and not v.holds]
        if failed:
            logger.error("❌ %d hard check(s) failed", len(failed))
        else:
            logger.info("✅ All %d hard checks passed", sum(v.hard for v in self.verdicts))
        return self.verdicts


def first_failure(verdicts: List[Verdict]) -> Optional[Verdict]:
    """First failing hard verdict in run order"""
    for verdict in verdicts:
        if verdict.hard and not verdict.holds:
            return verdict
    return None
