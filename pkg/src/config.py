#!/usr/bin/env python3
"""
Configuration settings for sgdrisk experiments
"""
import copy
import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from src.problem import (
    ProblemSpec,
    TailWindow,
    make_spectrum,
    max_stable_lr,
    rank_one_uniform_bias,
)
from src.utils.errors import ConfigError, SgdRiskError

logger = logging.getLogger(__name__)

# Project paths
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS_DIR = os.path.join(PROJECT_ROOT, "configs")
DEFAULT_CONFIG_PATH = os.path.join(CONFIGS_DIR, "default.yaml")
DEFAULT_OUT_DIR_NAME = "sgdrisk_out"
OUT_DIR_ENV = "SGDRISK_OUT_DIR"

# Default settings
DEFAULT_CONFIG = {
    "problem": {
        "spectrum": {"kind": "power_law", "d": 8, "params": {"exponent": 1.0, "scale": 1.0}},
        "sigma2": 0.1,
        "eta": None,            # wins over eta_fraction when set
        "eta_fraction": 0.5,    # eta = eta_fraction * max_stable_lr
        "batch": 1,
        "m0_bias": {"rank_one_uniform": 1.0},
    },
    "run": {
        "T": None,              # None means s + N
        "window": {"s": 50, "N": 100},
        "n_seeds": 200,
        "base_seed": 0,
    },
    "sweep": {"eta_fraction": None, "batch": None, "N": None},
    "output": {"directory": None, "formats": ["csv", "json"], "per_coordinate": False},
    "validate": {
        "seed": 0,
        "n_specs": 100,
        "max_d": 8,
        "horizon": 100,
        "batches": [1, 2, 4, 8, 64],
        "mc_specs": 10,
        "mc_seeds": 1000,
        "mc_T": 40,
        "isserlis_ns": [10000, 100000, 1000000],
        "isserlis_replicates": 5,
        "oracle_max_d": 64,
        "sandwich_repeats": 12,  # 18 window/fraction/batch cells each
        "sandwich_max_d": 64,
    },
}

SECTIONS = tuple(DEFAULT_CONFIG)
SWEEP_KEYS = (("eta_fraction", "eta"), ("batch", "b"), ("N", "N"))
# (key, minimum) for integer settings; lists also carry a minimum length
RUN_INTS = (("n_seeds", 2), ("base_seed", 0))
VALIDATE_INTS = (
    ("seed", 0), ("n_specs", 1), ("max_d", 1), ("horizon", 1), ("mc_specs", 1), ("mc_seeds", 2),
    ("mc_T", 2), ("isserlis_replicates", 1), ("oracle_max_d", 1), ("sandwich_repeats", 1),
    ("sandwich_max_d", 1),
)
VALIDATE_LISTS = (("batches", 1, 1), ("isserlis_ns", 10000, 2))


@dataclass(frozen=True, eq=False)
class GridPoint:
    """One resolved experiment: problem, window, horizon and the file-name suffix"""
    spec: ProblemSpec
    window: TailWindow
    T: int
    suffix: str = ""
    labels: Dict[str, Any] = field(default_factory=dict)


def _deep_merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Load a YAML experiment config and merge it over DEFAULT_CONFIG"""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError("config", f"invalid YAML in {path}: {e}")

    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    for section in raw:
        if section not in SECTIONS:
            raise ConfigError(str(section), f"unknown section, expected one of {SECTIONS}")
    logger.debug("🔄 Loaded config %s", path)
    merged = _deep_merge(DEFAULT_CONFIG, raw)
    # a spectrum given in the file replaces the default one instead of merging into it
    problem = raw.get("problem")
    if isinstance(problem, dict) and "spectrum" in problem:
        merged["problem"]["spectrum"] = copy.deepcopy(problem["spectrum"])
    return merged


def apply_overrides(config: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """
    Apply `section.key=value` overrides; values are parsed as YAML scalars or lists

    Args:
        config: Loaded config
        overrides: Strings like "run.window.N=500" (a leading "--" is ignored)

    Returns:
        New config with the overrides applied
    """
    result = copy.deepcopy(config)
    for item in overrides:
        text = item[2:] if item.startswith("--") else item
        if "=" not in text:
            raise ConfigError(text, "override must look like section.key=value")
        dotted, raw_value = text.split("=", 1)
        keys = dotted.split(".")
        if len(keys) < 2 or keys[0] not in SECTIONS:
            raise ConfigError(dotted, f"override must start with one of {SECTIONS}")
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as e:
            raise ConfigError(dotted, f"cannot parse value '{raw_value}': {e}")

        node = result
        for key in keys[:-1]:
            child = node.get(key)
            if not isinstance(child, dict):
                child = {}
                node[key] = child
            node = child
        node[keys[-1]] = value
    return result


def _as_int(value: Any, field_name: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) \
            or not math.isfinite(value) or int(value) != value:
        raise ConfigError(field_name, f"must be an integer >= {minimum}, got {value!r}")
    if value < minimum:
        raise ConfigError(field_name, f"must be >= {minimum}, got {value}")
    return int(value)


def _as_int_list(values: Any, field_name: str, minimum: int, min_length: int = 1) -> List[int]:
    if not isinstance(values, (list, tuple)) or len(values) < min_length:
        raise ConfigError(field_name, f"must be a list of at least {min_length} integer(s)")
    return [_as_int(value, field_name, minimum) for value in values]


def resolve_settings(config: Dict[str, Any]) -> Dict[str, Any]:
    """
    Type-check the `run` and `validate` blocks

    Returns:
        New config whose integer settings are plain ints
    """
    result = copy.deepcopy(config)
    run = result.get("run") or {}
    validate = result.get("validate") or {}
    for name, block in (("run", run), ("validate", validate)):
        if not isinstance(block, dict):
            raise ConfigError(name, "must be a mapping")
    for key, minimum in RUN_INTS:
        if key in run:
            run[key] = _as_int(run[key], f"run.{key}", minimum)
    for key, minimum in VALIDATE_INTS:
        if key in validate:
            validate[key] = _as_int(validate[key], f"validate.{key}", minimum)
    for key, minimum, min_length in VALIDATE_LISTS:
        if key in validate:
            validate[key] = _as_int_list(validate[key], f"validate.{key}", minimum, min_length)
    result["run"], result["validate"] = run, validate
    return result


def _resolve_spectrum(raw: Any):
    if isinstance(raw, (list, tuple)):
        try:
            return make_spectrum("explicit", len(raw), values=list(raw))
        except (SgdRiskError, TypeError, ValueError) as e:
            raise ConfigError("problem.spectrum", str(e))
    if not isinstance(raw, dict):
        raise ConfigError("problem.spectrum", "must be a list of eigenvalues or a {kind, d, params} mapping")
    kind = raw.get("kind")
    if kind is None:
        raise ConfigError("problem.spectrum.kind", "missing")
    params = raw.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError("problem.spectrum.params", "must be a mapping")
    d = raw.get("d")
    if d is None and kind == "explicit" and "values" in params:
        d = len(params["values"])
    if d is None:
        raise ConfigError("problem.spectrum.d", "missing")
    d = _as_int(d, "problem.spectrum.d", 1)
    try:
        return make_spectrum(kind, d, **params)
    except SgdRiskError as e:
        field_name = "problem.spectrum.kind" if "unknown spectrum kind" in str(e) else "problem.spectrum.params"
        raise ConfigError(field_name, str(e))
    except (TypeError, ValueError) as e:
        raise ConfigError("problem.spectrum.params", str(e))


def _resolve_m0(raw: Any, d: int):
    if raw is None:
        return None
    if isinstance(raw, dict):
        if set(raw) != {"rank_one_uniform"}:
            raise ConfigError("problem.m0_bias", "mapping form must be {rank_one_uniform: r}")
        try:
            return rank_one_uniform_bias(float(raw["rank_one_uniform"]), d)
        except (SgdRiskError, TypeError, ValueError) as e:
            raise ConfigError("problem.m0_bias.rank_one_uniform", str(e))
    if isinstance(raw, (list, tuple)):
        return list(raw)
    raise ConfigError("problem.m0_bias", "must be a list or {rank_one_uniform: r}")


def resolve_problem(block: Dict[str, Any], eta_fraction: Optional[float] = None,
                    batch: Optional[int] = None) -> ProblemSpec:
    """
    Build a ProblemSpec from the `problem` config block

    Args:
        block: The `problem` mapping
        eta_fraction: Swept step-size fraction (overrides the block's eta settings)
        batch: Swept batch size

    Returns:
        Validated ProblemSpec
    """
    spectrum = _resolve_spectrum(block.get("spectrum"))
    b = block.get("batch", 1) if batch is None else batch
    try:
        b = int(b)
    except (TypeError, ValueError):
        raise ConfigError("problem.batch", f"must be a positive integer, got {b}")
    if b < 1:
        raise ConfigError("problem.batch", f"must be a positive integer, got {b}")

    if eta_fraction is not None:
        eta_field, fraction, eta = "sweep.eta_fraction", eta_fraction, None
    else:
        eta_field, fraction, eta = "problem.eta_fraction", block.get("eta_fraction"), block.get("eta")
    try:
        if eta is None:
            if fraction is None:
                raise ConfigError("problem.eta", "give eta or eta_fraction")
            if not float(fraction) > 0:
                raise ConfigError(eta_field, f"must be > 0, got {fraction}")
            eta = float(fraction) * max_stable_lr(spectrum, 2.0 / b)
        else:
            eta_field = "problem.eta"
            eta = float(eta)
    except (TypeError, ValueError) as e:
        raise ConfigError(eta_field, str(e))
    except ConfigError:
        raise
    except SgdRiskError as e:
        raise ConfigError("problem.spectrum", str(e))

    m0 = _resolve_m0(block.get("m0_bias"), spectrum.d)
    try:
        sigma2 = float(block.get("sigma2", 0.0))
    except (TypeError, ValueError) as e:
        raise ConfigError("problem.sigma2", str(e))
    try:
        return ProblemSpec(spectrum=spectrum, sigma2=sigma2, eta=eta, batch=b, m0_bias=m0)
    except (TypeError, ValueError) as e:
        message = str(e)
        for name in ("sigma2", "eta", "m0_bias", "batch"):
            if message.startswith(name):
                raise ConfigError(f"problem.{name}", message)
        raise ConfigError("problem", message)


def _resolve_window(run: Dict[str, Any], N: Optional[int] = None) -> TailWindow:
    window = run.get("window") or {}
    try:
        return TailWindow(s=window.get("s", 0), N=window.get("N", 1) if N is None else N)
    except (TypeError, ValueError) as e:
        raise ConfigError("run.window", str(e))


def _label(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def resolve_grid(config: Dict[str, Any]) -> List[GridPoint]:
    """
    Expand the sweep block into grid points

    Swept keys are combined as a product in the order eta_fraction, batch, N;
    each contributes `_<tag><value>` to the suffix (eta, b, N).
    """
    sweep = config.get("sweep") or {}
    run = config.get("run") or {}
    axes = []
    for key, tag in SWEEP_KEYS:
        values = sweep.get(key)
        if values is None:
            continue
        if not isinstance(values, (list, tuple)) or len(values) == 0:
            raise ConfigError(f"sweep.{key}", "must be a non-empty list")
        axes.append((key, tag, list(values)))

    points = []
    for combo in itertools.product(*[values for _, _, values in axes]):
        chosen = {key: value for (key, _, _), value in zip(axes, combo)}
        suffix = "".join(f"_{tag}{_label(value)}" for (_, tag, _), value in zip(axes, combo))
        spec = resolve_problem(config["problem"], eta_fraction=chosen.get("eta_fraction"),
                               batch=chosen.get("batch"))
        window = _resolve_window(run, chosen.get("N"))
        T = run.get("T")
        if T is None:
            T = window.end
        if isinstance(T, bool) or not isinstance(T, int) or T < 0:
            raise ConfigError("run.T", f"must be a non-negative integer, got {T}")
        points.append(GridPoint(spec=spec, window=window, T=T, suffix=suffix, labels=chosen))
    logger.debug("🔄 Resolved %d grid point(s)", len(points))
    return points


def output_root(config: Dict[str, Any], cli_value: Optional[str] = None) -> str:
    """Output directory: --out-dir, then output.directory, then $SGDRISK_OUT_DIR, then ./sgdrisk_out"""
    if cli_value:
        return cli_value
    configured = (config.get("output") or {}).get("directory")
    if configured:
        return str(configured)
    env_value = os.environ.get(OUT_DIR_ENV)
    if env_value:
        return env_value
    return os.path.join(os.getcwd(), DEFAULT_OUT_DIR_NAME)
