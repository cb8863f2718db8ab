"""
Problem representation
Everything lives in the eigenbasis of the data covariance H = Q diag(lambda) Q^T:
the spectrum, the step size and batch size, the noise level and the squared
initial offset coordinates m0_bias.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from src.utils.errors import DegenerateProblemError, InvalidArgumentError

logger = logging.getLogger(__name__)

SPECTRUM_KINDS = ("power_law", "uniform", "explicit", "random")


def _frozen(values: Sequence[float]) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues of H, non-negative and sorted descending"""
    lambdas: np.ndarray

    def __post_init__(self):
        lambdas = np.asarray(self.lambdas, dtype=float)
        if lambdas.ndim != 1 or lambdas.size < 1:
            raise InvalidArgumentError("spectrum must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(lambdas)):
            raise InvalidArgumentError("spectrum entries must be finite")
        if np.any(lambdas < 0):
            raise InvalidArgumentError("spectrum entries must be non-negative")
        if np.any(np.diff(lambdas) > 0):
            raise InvalidArgumentError("spectrum must be sorted descending")
        object.__setattr__(self, "lambdas", _frozen(lambdas))

    @property
    def d(self) -> int:
        return int(self.lambdas.size)

    @property
    def lambda_max(self) -> float:
        return float(self.lambdas[0])

    @property
    def trace(self) -> float:
        return float(np.sum(self.lambdas))

    def __eq__(self, other) -> bool:
        return isinstance(other, Spectrum) and np.array_equal(self.lambdas, other.lambdas)

    def __hash__(self) -> int:
        return hash(self.lambdas.tobytes())


@dataclass(frozen=True)
class TailWindow:
    """Average iterates s ... s+N-1 after a burn-in of s iterates"""
    s: int
    N: int

    def __post_init__(self):
        if int(self.s) != self.s or self.s < 0:
            raise InvalidArgumentError(f"window s must be a non-negative integer, got {self.s}")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidArgumentError(f"window N must be a positive integer, got {self.N}")
        object.__setattr__(self, "s", int(self.s))
        object.__setattr__(self, "N", int(self.N))

    @property
    def end(self) -> int:
        """One past the last averaged iterate (s + N)"""
        return self.s + self.N

    @property
    def last(self) -> int:
        return self.s + self.N - 1


@dataclass(frozen=True)
class Thresholds:
    """Band thresholds k* (cutoff 1/(eta N)) and k-dagger (cutoff 1/(eta (s+N)))"""
    k_star: int
    k_dagger: int


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """
    Gaussian linear regression SGD problem in the eigenbasis

    alpha = 2 / batch is derived; m0_bias holds the squared eigen-coordinates
    of w0 - w*.
    """
    spectrum: Spectrum
    sigma2: float
    eta: float
    batch: int = 1
    m0_bias: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if not isinstance(self.spectrum, Spectrum):
            raise InvalidArgumentError("spectrum must be a Spectrum")
        if not np.isfinite(self.sigma2) or self.sigma2 < 0:
            raise InvalidArgumentError(f"sigma2 must be >= 0, got {self.sigma2}")
        if not np.isfinite(self.eta) or self.eta <= 0:
            raise InvalidArgumentError(f"eta must be > 0, got {self.eta}")
        if int(self.batch) != self.batch or self.batch < 1:
            raise InvalidArgumentError(f"batch must be a positive integer, got {self.batch}")
        m0 = np.zeros(self.spectrum.d) if self.m0_bias is None else np.asarray(self.m0_bias, dtype=float)
        if m0.shape != (self.spectrum.d,):
            raise InvalidArgumentError(
                f"m0_bias must have length d={self.spectrum.d}, got shape {m0.shape}"
            )
        if not np.all(np.isfinite(m0)) or np.any(m0 < 0):
            raise InvalidArgumentError("m0_bias must be finite and elementwise >= 0")
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "batch", int(self.batch))
        object.__setattr__(self, "m0_bias", _frozen(m0))

    @property
    def d(self) -> int:
        return self.spectrum.d

    @property
    def lambdas(self) -> np.ndarray:
        return self.spectrum.lambdas

    @property
    def alpha(self) -> float:
        return 2.0 / self.batch

    @property
    def max_stable_lr(self) -> float:
        """Stable step-size limit; inf when lambda_max + alpha Tr(H) is zero"""
        scale = self.spectrum.lambda_max + self.alpha * self.spectrum.trace
        return 1.0 / scale if scale > 0 else float("inf")

    @property
    def stable(self) -> bool:
        return self.eta <= self.max_stable_lr

    @property
    def coupling(self) -> float:
        """eta * alpha * Tr(H); the bounds need 1 - coupling > 0"""
        return self.eta * self.alpha * self.spectrum.trace

    def with_(self, **changes) -> "ProblemSpec":
        """Copy with some fields replaced"""
        return replace(self, **changes)

    def describe(self) -> dict:
        """Plain mapping of the parameters (used for digests and reports)"""
        return {
            "lambdas": self.lambdas,
            "sigma2": self.sigma2,
            "eta": self.eta,
            "batch": self.batch,
            "m0_bias": self.m0_bias,
        }


def make_spectrum(kind: str, d: int, **params) -> Spectrum:
    """
    Build a descending spectrum

    Args:
        kind: "power_law" (exponent a > 0, scale c > 0), "uniform" (value v >= 0),
              "explicit" (values: list of length d) or "random" (low, high, seed)
        d: Dimension
        **params: Parameters for the kind

    Returns:
        Spectrum with lambda_j = c * j^(-a) for power_law
    """
    if int(d) != d or d < 1:
        raise InvalidArgumentError(f"d must be a positive integer, got {d}")
    d = int(d)

    if kind == "power_law":
        a = float(params.get("exponent", params.get("a", 1.0)))
        c = float(params.get("scale", params.get("c", 1.0)))
        if a <= 0:
            raise InvalidArgumentError(f"power_law exponent must be > 0, got {a}")
        if c <= 0:
            raise InvalidArgumentError(f"power_law scale must be > 0, got {c}")
        lambdas = c * np.arange(1, d + 1, dtype=float) ** (-a)
    elif kind == "uniform":
        v = float(params.get("value", params.get("v", 1.0)))
        if v < 0:
            raise InvalidArgumentError(f"uniform value must be >= 0, got {v}")
        lambdas = np.full(d, v)
    elif kind == "explicit":
        values = params.get("values")
        if values is None:
            raise InvalidArgumentError("explicit spectrum needs 'values'")
        lambdas = np.asarray(values, dtype=float)
        if lambdas.shape != (d,):
            raise InvalidArgumentError(f"explicit spectrum has {lambdas.size} values, expected d={d}")
        if not np.all(np.isfinite(lambdas)) or np.any(lambdas < 0):
            raise InvalidArgumentError("explicit spectrum values must be finite and non-negative")
        lambdas = np.sort(lambdas)[::-1]
    elif kind == "random":
        low = float(params.get("low", 0.0))
        high = float(params.get("high", 1.0))
        if low < 0 or high < low:
            raise InvalidArgumentError(f"random spectrum needs 0 <= low <= high, got ({low}, {high})")
        rng = np.random.default_rng(int(params.get("seed", 0)))
        lambdas = np.sort(rng.uniform(low, high, size=d))[::-1]
    else:
        raise InvalidArgumentError(f"unknown spectrum kind '{kind}', expected one of {SPECTRUM_KINDS}")

    return Spectrum(lambdas)


def max_stable_lr(spectrum: Spectrum, alpha: float) -> float:
    """
    Largest step size allowed by eta <= 1 / (lambda_max + alpha * Tr(H))

    Args:
        spectrum: Eigenvalues of H
        alpha: Coupling constant (2 / batch)

    Returns:
        1 / (lambda_max + alpha * Tr(H))
    """
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be >= 0, got {alpha}")
    scale = spectrum.lambda_max + alpha * spectrum.trace
    if scale <= 0:
        raise DegenerateProblemError("lambda_max + alpha * Tr(H) is zero; no finite stable step size")
    return 1.0 / scale


def thresholds(spectrum: Spectrum, eta: float, window: TailWindow) -> Thresholds:
    """
    Band thresholds on the descending spectrum

    k_star is the largest j with lambda_j >= 1/(eta N) and k_dagger the largest
    j with lambda_j >= 1/(eta (s+N)); 0 when no eigenvalue qualifies. Ties
    belong to the head band.

    Args:
        spectrum: Eigenvalues of H
        eta: Step size
        window: Tail-averaging window

    Returns:
        Thresholds
    """
    if not eta > 0:
        raise InvalidArgumentError(f"eta must be > 0, got {eta}")
    cut_star = 1.0 / (eta * window.N)
    cut_dagger = 1.0 / (eta * window.end)
    # descending order makes the predicate a prefix
    k_star = int(np.count_nonzero(spectrum.lambdas >= cut_star))
    k_dagger = int(np.count_nonzero(spectrum.lambdas >= cut_dagger))
    return Thresholds(k_star=k_star, k_dagger=k_dagger)


def band_masks(d: int, th: Thresholds) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean masks (head j <= k*, mid k* < j <= k-dagger, tail j > k-dagger) over 0-based indices"""
    idx = np.arange(d)
    head = idx < th.k_star
    mid = (idx >= th.k_star) & (idx < th.k_dagger)
    tail = idx >= th.k_dagger
    return head, mid, tail


def rank_one_uniform_bias(r: float, d: int) -> np.ndarray:
    """m0_bias with every coordinate r^2 / d (an offset of norm r spread evenly)"""
    if r < 0:
        raise InvalidArgumentError(f"rank_one_uniform radius must be >= 0, got {r}")
    return np.full(int(d), float(r) ** 2 / int(d))


def spec_from_fraction(spectrum: Spectrum, eta_fraction: float, batch: int = 1, sigma2: float = 0.0,
                       m0_bias: Optional[np.ndarray] = None) -> ProblemSpec:
    """ProblemSpec with eta = eta_fraction * max_stable_lr(spectrum, 2 / batch)"""
    if not eta_fraction > 0:
        raise InvalidArgumentError(f"eta_fraction must be > 0, got {eta_fraction}")
    eta = eta_fraction * max_stable_lr(spectrum, 2.0 / batch)
    return ProblemSpec(spectrum=spectrum, sigma2=sigma2, eta=eta, batch=batch, m0_bias=m0_bias)
