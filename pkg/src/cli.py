#!/usr/bin/env python3
"""
Command-line front end
Resolves the YAML config into grid points, drives the engine, bounds, Monte Carlo
and validation runs, and writes CSV / JSON artifacts.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 stability refusal.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.config import (
    GridPoint,
    apply_overrides,
    load_config,
    output_root,
    resolve_grid,
    resolve_settings,
)
from src.problem import thresholds
from src.services.bounds import bias_risk_bound, lower_bound_diagnostic, sharpness_gap, variance_risk_bound
from src.services.exact_engine import (
    RecursionCoefficients,
    evolve_split,
    excess_risk_of_m,
    pointwise_risks,
    risk_of_m,
    tail_excess_exact,
    tail_risk_exact,
    tail_risk_upper_bound,
)
from src.services.mc_sim import FullProblem, mc_run
from src.services.oracles import append_verdict
from src.services.validation import ValidationSuite, first_failure
from src.utils.errors import ConfigError, InvalidArgumentError, SgdRiskError, StabilityViolationError
from src.utils.export import write_csv, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_UNSTABLE = 3

COMMANDS = ("evolve", "bounds", "tail-risk", "mc", "validate", "sweep")


class RunContext:
    """Everything a subcommand needs: resolved config, grid, output root and flags"""

    def __init__(self, args: argparse.Namespace, config: Dict[str, Any], points: List[GridPoint]):
        self.args = args
        self.config = config
        self.points = points
        self.out_dir = output_root(config, args.out_dir)
        output = config.get("output") or {}
        self.formats = set(output.get("formats") or ("csv", "json"))
        self.per_coordinate = bool(args.per_coordinate or output.get("per_coordinate"))

    def path(self, stem: str, suffix: str = "", ext: str = "csv") -> str:
        return os.path.join(self.out_dir, f"{stem}{suffix}.{ext}")

    def coefficients(self, point: GridPoint) -> Optional[RecursionCoefficients]:
        if not self.args.inject_coeff_bug:
            return None
        return RecursionCoefficients.from_spec(point.spec).perturbed()

    def require_stable(self, point: GridPoint, refuse_always: bool = False) -> None:
        spec = point.spec
        if spec.stable:
            return
        if refuse_always or not self.args.allow_unstable:
            raise StabilityViolationError(
                f"grid point{point.suffix or ''}: eta={spec.eta:.6g} exceeds the stable step size "
                f"{spec.max_stable_lr:.6g} (pass --allow-unstable to run anyway)",
                eta=spec.eta,
                max_stable_lr=spec.max_stable_lr,
            )
        logger.warning("⚠️ Running unstable grid point%s (eta=%.6g > %.6g)",
                       point.suffix, spec.eta, spec.max_stable_lr)


def _point_header(point: GridPoint) -> Dict[str, Any]:
    spec = point.spec
    return {
        "eta": spec.eta,
        "batch": spec.batch,
        "alpha": spec.alpha,
        "sigma2": spec.sigma2,
        "d": spec.d,
        "max_stable_lr": spec.max_stable_lr,
        "stable": spec.stable,
        "window": {"s": point.window.s, "N": point.window.N},
        "T": point.T,
        "labels": point.labels,
    }


def cmd_evolve(ctx: RunContext) -> int:
    for point in ctx.points:
        ctx.require_stable(point)
        traj = evolve_split(point.spec, point.T, coefficients=ctx.coefficients(point))
        risks = pointwise_risks(traj)
        if "csv" in ctx.formats:
            columns = {"t": np.arange(traj.T + 1), **risks}
            write_csv(ctx.path("trajectory", point.suffix), columns,
                      ["t", "excess_risk", "bias_excess", "variance_excess"])
        if ctx.per_coordinate:
            steps, d = traj.bias.shape
            columns = {
                "t": np.repeat(np.arange(steps), d),
                "k": np.tile(np.arange(1, d + 1), steps),
                "m_bias": traj.bias.ravel(),
                "m_var": traj.variance.ravel(),
            }
            write_csv(ctx.path("trajectory_coords", point.suffix), columns, ["t", "k", "m_bias", "m_var"])
    return EXIT_OK


def _bounds_payload(point: GridPoint, coefficients: Optional[RecursionCoefficients]) -> Dict[str, Any]:
    spec, window = point.spec, point.window
    bias = bias_risk_bound(spec, window)
    variance = variance_risk_bound(spec, window)
    lower = lower_bound_diagnostic(spec, window)
    traj = evolve_split(spec, window.last, coefficients=coefficients)
    exact = tail_excess_exact(traj, window)
    upper = bias.total + variance.total
    th = thresholds(spec.spectrum, spec.eta, window)
    return {
        **_point_header(point),
        "thresholds": {"k_star": th.k_star, "k_dagger": th.k_dagger},
        "bias_bound": bias.to_dict(),
        "variance_bound": variance.to_dict(),
        "lower_bound": lower.to_dict(),
        "sharpness": sharpness_gap(spec, window, exact=exact).to_dict(),
        "exact_tail_excess": exact,
        "exact_tail_bias": tail_excess_exact(traj, window, "bias"),
        "exact_tail_variance": tail_excess_exact(traj, window, "variance"),
        "upper_total": upper,
        "sandwich_holds": exact <= upper + 1e-12,
    }


def cmd_bounds(ctx: RunContext) -> int:
    for point in ctx.points:
        ctx.require_stable(point, refuse_always=True)
        payload = _bounds_payload(point, ctx.coefficients(point))
        if "json" in ctx.formats:
            write_json(ctx.path("bounds", point.suffix, "json"), payload)
    return EXIT_OK


def cmd_tail_risk(ctx: RunContext) -> int:
    for point in ctx.points:
        ctx.require_stable(point)
        window = point.window
        traj = evolve_split(point.spec, max(point.T, window.last), coefficients=ctx.coefficients(point))
        last = traj.state(window.last)
        th = thresholds(point.spec.spectrum, point.spec.eta, window)
        upper_bound = tail_risk_upper_bound(traj, window) if point.spec.stable else None
        payload = {
            **_point_header(point),
            "thresholds": {"k_star": th.k_star, "k_dagger": th.k_dagger},
            "tail_risk_exact": tail_risk_exact(traj, window),
            "tail_risk_exact_bias": tail_risk_exact(traj, window, "bias"),
            "tail_risk_exact_variance": tail_risk_exact(traj, window, "variance"),
            "tail_risk_upper_bound": upper_bound,
            "pointwise_risk_last": risk_of_m(last.total, point.spec),
            "pointwise_excess_last": excess_risk_of_m(last.total, point.spec),
        }
        if "json" in ctx.formats:
            write_json(ctx.path("tail_risk", point.suffix, "json"), payload)
    return EXIT_OK


def cmd_mc(ctx: RunContext) -> int:
    run = ctx.config.get("run") or {}
    n_seeds = int(run.get("n_seeds", 200))
    base_seed = int(run.get("base_seed", 0))
    for point in ctx.points:
        ctx.require_stable(point)
        if point.T < point.window.end:
            raise ConfigError("run.T", f"Monte Carlo needs T >= s + N = {point.window.end}, got {point.T}")
        problem = FullProblem.from_spec(point.spec)
        result = mc_run(problem, n_seeds, point.T, point.window, base_seed=base_seed, jobs=ctx.args.jobs)
        traj = evolve_split(point.spec, point.window.last, coefficients=ctx.coefficients(point))
        exact = tail_excess_exact(traj, point.window)
        if "csv" in ctx.formats:
            write_csv(ctx.path("mc_seeds", point.suffix),
                      {"seed": result.seeds, "final_excess": result.final_excess,
                       "tail_avg_excess": result.tail_avg_excess},
                      ["seed", "final_excess", "tail_avg_excess"])
        if "json" in ctx.formats:
            estimate = result.estimate
            write_json(ctx.path("mc_summary", point.suffix, "json"), {
                **_point_header(point),
                "mean": estimate.mean,
                "std_error": estimate.std_error,
                "n_seeds": estimate.n_seeds,
                "base_seed": base_seed,
                "rng_id": result.rng_id,
                "exact_tail_excess": exact,
                "z_score": (estimate.mean - exact) / estimate.std_error if estimate.std_error > 0 else 0.0,
            })
    return EXIT_OK


def cmd_validate(ctx: RunContext) -> int:
    for point in ctx.points:
        ctx.require_stable(point)
    suite = ValidationSuite(ctx.points, ctx.config.get("validate") or {},
                            coefficients_bug=ctx.args.inject_coeff_bug, jobs=ctx.args.jobs)
    verdicts = suite.run()

    log_path = ctx.path("verdicts", ext="jsonl")
    os.makedirs(ctx.out_dir, exist_ok=True)
    open(log_path, "w").close()
    for verdict in verdicts:
        append_verdict(log_path, verdict)
    logger.info("📁 Wrote %s (%d verdicts)", log_path, len(verdicts))

    failure = first_failure(verdicts)
    if failure is not None:
        print(f"❌ {failure.check} failed: max_violation={failure.max_violation:.6g} "
              f"(params_digest={failure.params_digest})", file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


SWEEP_COLUMNS = [
    "suffix", "eta", "batch", "s", "N", "stable", "max_stable_lr", "k_star", "k_dagger",
    "exact_tail_excess", "bias_bound", "variance_bound", "upper_total", "bias_lb", "variance_lb",
]


def _sweep_row(point: GridPoint, coefficients: Optional[RecursionCoefficients]) -> Dict[str, Any]:
    spec, window = point.spec, point.window
    th = thresholds(spec.spectrum, spec.eta, window)
    traj = evolve_split(spec, window.last, coefficients=coefficients)
    row = {
        "suffix": point.suffix,
        "eta": spec.eta,
        "batch": spec.batch,
        "s": window.s,
        "N": window.N,
        "stable": spec.stable,
        "max_stable_lr": spec.max_stable_lr,
        "k_star": th.k_star,
        "k_dagger": th.k_dagger,
        "exact_tail_excess": tail_excess_exact(traj, window),
    }
    if spec.stable:
        bias = bias_risk_bound(spec, window)
        variance = variance_risk_bound(spec, window)
        lower = lower_bound_diagnostic(spec, window)
        row.update(bias_bound=bias.total, variance_bound=variance.total, upper_total=bias.total + variance.total,
                   bias_lb=lower.bias_lb, variance_lb=lower.variance_lb)
    else:
        row.update({key: float("nan") for key in ("bias_bound", "variance_bound", "upper_total",
                                                   "bias_lb", "variance_lb")})
    return row


def cmd_sweep(ctx: RunContext) -> int:
    for point in ctx.points:
        ctx.require_stable(point)
    jobs: List[Tuple[GridPoint, Optional[RecursionCoefficients]]] = [
        (point, ctx.coefficients(point)) for point in ctx.points
    ]
    if ctx.args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ctx.args.jobs) as executor:
            rows = list(executor.map(_sweep_row, *zip(*jobs)))
    else:
        rows = [_sweep_row(point, coefficients) for point, coefficients in jobs]
    columns = {name: [row[name] for row in rows] for name in SWEEP_COLUMNS}
    write_csv(ctx.path("sweep"), columns, SWEEP_COLUMNS)
    return EXIT_OK


HANDLERS = {
    "evolve": cmd_evolve,
    "bounds": cmd_bounds,
    "tail-risk": cmd_tail_risk,
    "mc": cmd_mc,
    "validate": cmd_validate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults are used when omitted)")
    common.add_argument("--out-dir", help="Output directory (overrides output.directory and $SGDRISK_OUT_DIR)")
    common.add_argument("--jobs", type=int, default=1, help="Worker processes for seeds and grid points")
    common.add_argument("--allow-unstable", action="store_true",
                        help="Run grid points whose step size violates the stability condition")
    common.add_argument("--per-coordinate", action="store_true", help="Also dump m_bias / m_var per coordinate")
    common.add_argument("--inject-coeff-bug", action="store_true",
                        help="Perturb the recursion's quadratic coefficient by 1%% (negative control)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(
        prog="sgdrisk",
        description="Exact risk trajectories and bounds for constant-step SGD on Gaussian linear regression",
        epilog="Config fields can be overridden with --section.key=value, e.g. --run.window.N=500",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("evolve", parents=[common], help="Write the exact bias/variance risk trajectory")
    sub.add_parser("bounds", parents=[common], help="Evaluate the tail-averaged upper bounds and diagnostics")
    sub.add_parser("tail-risk", parents=[common], help="Exact tail-averaged risk and its upper-bound expression")
    sub.add_parser("mc", parents=[common], help="Monte Carlo SGD runs with per-seed output")
    sub.add_parser("validate", parents=[common], help="Run the full certification suite")
    sub.add_parser("sweep", parents=[common], help="One summary row per grid point")
    return parser


def _split_overrides(extra: List[str]) -> List[str]:
    overrides = []
    for item in extra:
        if item.startswith("--") and "=" in item and "." in item.split("=", 1)[0]:
            overrides.append(item[2:])
        else:
            raise ConfigError(item, "unrecognized argument (overrides look like --section.key=value)")
    return overrides


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(message)s", force=True)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    _configure_logging(args)

    try:
        overrides = _split_overrides(extra)
        config = resolve_settings(apply_overrides(load_config(args.config), overrides))
        points = resolve_grid(config)
        if args.jobs < 1:
            raise ConfigError("--jobs", f"must be >= 1, got {args.jobs}")
    except ConfigError as e:
        print(f"❌ Config error in {e.field}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgumentError as e:
        print(f"❌ Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    ctx = RunContext(args, config, points)
    logger.info("🔄 %s: %d grid point(s) -> %s", args.command, len(points), ctx.out_dir)
    try:
        code = HANDLERS[args.command](ctx)
    except StabilityViolationError as e:
        print(f"❌ Stability refusal: {e}", file=sys.stderr)
        return EXIT_UNSTABLE
    except ConfigError as e:
        print(f"❌ Config error in {e.field}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SgdRiskError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    if code == EXIT_OK:
        logger.info("✅ %s finished", args.command)
    return code


if __name__ == "__main__":
    sys.exit(main())
