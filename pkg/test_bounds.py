#!/usr/bin/env python3
"""
Test Bounds
Tests the tail-averaged bias/variance bounds, the iterate bounds, the mass
certificates and the lower-bound diagnostic against the exact engine
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from src.problem import ProblemSpec, TailWindow, make_spectrum, rank_one_uniform_bias, spec_from_fraction
from src.services.bounds import (
    bias_iterate_bound,
    bias_risk_bound,
    ct_sum_check,
    lower_bound_diagnostic,
    mass_drop_check,
    sharpness_gap,
    variance_iterate_bound,
    variance_risk_bound,
)
from src.services.exact_engine import evolve_split, tail_excess_exact
from src.utils.errors import StabilityViolationError


def scalar_spec(eta=0.05, sigma2=0.0, m0=1.0, batch=1):
    return ProblemSpec(spectrum=make_spectrum("explicit", 1, values=[1.0]), sigma2=sigma2, eta=eta,
                       batch=batch, m0_bias=np.array([m0]))


def power_law_grid(seed=0, max_d=64, repeats=12):
    """Stable power-law problems over step fractions, batch sizes and windows (18 cells x repeats)"""
    rng = np.random.default_rng(seed)
    dims = [d for d in (1, 2, 4, 8, 16, 32, 64) if d <= max_d]
    for s, N in ((0, 10), (100, 100), (1000, 1000)):
        for fraction in (0.25, 0.5, 1.0):
            for batch in (1, 4):
                for _ in range(repeats):
                    d = int(rng.choice(dims))
                    spectrum = make_spectrum("power_law", d, exponent=float(rng.uniform(0.5, 2.0)))
                    spec = spec_from_fraction(spectrum, fraction, batch=batch, sigma2=float(rng.uniform(0, 1)),
                                              m0_bias=rng.uniform(0, 1, d))
                    yield spec, TailWindow(s, N)


def test_bias_bound_zero_offset():
    """No bias mass gives a zero bias bound"""
    spec = ProblemSpec(spectrum=make_spectrum("power_law", 6), sigma2=1.0, eta=0.01)
    report = bias_risk_bound(spec, TailWindow(s=10, N=10))
    assert (report.term_head, report.term_tail, report.term_cross, report.total) == (0.0, 0.0, 0.0, 0.0)


def test_bias_bound_scalar_single_iterate():
    """N = 1: the cutoff 1/(eta N) = 20 exceeds lambda, so everything sits in the tail band"""
    report = bias_risk_bound(scalar_spec(), TailWindow(s=0, N=1))
    assert report.k_star == 0
    assert report.term_head == 0.0
    assert report.term_tail == pytest.approx(4.0)
    assert report.term_cross == pytest.approx(0.2 / 0.045 * 0.01)
    assert report.total == report.term_head + report.term_tail + report.term_cross


def test_bias_bound_scalar_head_band():
    """N = 100: the cutoff is 0.2, so lambda = 1 is in the head band"""
    report = bias_risk_bound(scalar_spec(), TailWindow(s=0, N=100))
    assert report.k_star == 1
    assert report.term_head == pytest.approx(0.04)
    assert report.term_tail == 0.0
    assert report.term_cross == pytest.approx(2.0 / (0.05 * 100 * 0.9) / 100)


def test_variance_bound_examples():
    """sigma^2 = 0 gives 0; the scalar case is (1 / 0.9) / 100"""
    assert variance_risk_bound(scalar_spec(), TailWindow(0, 100)).total == 0.0
    report = variance_risk_bound(scalar_spec(sigma2=1.0), TailWindow(s=0, N=100))
    assert (report.k_star, report.k_dagger) == (1, 1)
    assert report.total == pytest.approx(1.0 / 0.9 / 100)
    assert report.prefactor == pytest.approx(1.0 / 0.9)
    assert report.total == report.prefactor * (report.band_head + report.band_mid + report.band_tail)
    assert report.batch_scaled_total == report.total


def test_variance_bound_batch_scaled_total():
    """batch_scaled_total divides by the batch size"""
    spec = scalar_spec(sigma2=1.0, batch=4)
    report = variance_risk_bound(spec, TailWindow(s=0, N=100))
    assert report.batch_scaled_total == pytest.approx(report.total / 4)


def test_variance_bound_monotonicity():
    """Linear in sigma^2; non-decreasing in s while the k-dagger band is unchanged"""
    spec = spec_from_fraction(make_spectrum("power_law", 50, exponent=1.2), 0.5, sigma2=1.0)
    base = variance_risk_bound(spec, TailWindow(10, 100)).total
    assert variance_risk_bound(spec.with_(sigma2=3.0), TailWindow(10, 100)).total == pytest.approx(3.0 * base)

    reports = [variance_risk_bound(spec, TailWindow(s, 100)) for s in range(0, 2000, 25)]
    for earlier, later in zip(reports, reports[1:]):
        if earlier.k_dagger == later.k_dagger:
            assert later.total >= earlier.total


def test_bounds_accept_zero_spectrum():
    """lambda = 0 everywhere is stable for any eta and both bounds vanish"""
    spec = ProblemSpec(spectrum=make_spectrum("uniform", 3, value=0.0), sigma2=1.0, eta=0.1,
                       m0_bias=np.ones(3))
    window = TailWindow(5, 10)
    assert bias_risk_bound(spec, window).total == 0.0
    assert variance_risk_bound(spec, window).total == 0.0


def test_bounds_refuse_unstable_specs():
    """Every bound raises StabilityViolationError when eta is too large"""
    spec = scalar_spec(eta=0.5)
    window = TailWindow(0, 10)
    for bound in (bias_risk_bound, variance_risk_bound, lower_bound_diagnostic):
        with pytest.raises(StabilityViolationError):
            bound(spec, window)
    with pytest.raises(StabilityViolationError):
        bias_iterate_bound(spec, 3)
    with pytest.raises(StabilityViolationError):
        ct_sum_check(spec, 3)


def test_risk_sandwich_on_power_law_grid():
    """Exact tail excess <= bias bound + variance bound at 216 grid points with d <= 64"""
    count = 0
    for spec, window in power_law_grid(seed=1):
        count += 1
        exact = tail_excess_exact(evolve_split(spec, window.last), window)
        upper = bias_risk_bound(spec, window).total + variance_risk_bound(spec, window).total
        assert exact <= upper + 1e-12
    assert count == 216


def test_bias_and_variance_bounds_dominate_their_parts():
    """Each bound dominates the matching part of the exact tail excess"""
    for spec, window in power_law_grid(seed=2, max_d=16, repeats=2):
        traj = evolve_split(spec, window.last)
        assert tail_excess_exact(traj, window, "bias") <= bias_risk_bound(spec, window).total + 1e-12
        assert tail_excess_exact(traj, window, "variance") <= variance_risk_bound(spec, window).total + 1e-12


def test_iterate_bounds_initial_values():
    """t = 0: bias bound is m0, variance bound is 0"""
    spec = spec_from_fraction(make_spectrum("power_law", 5), 0.7, sigma2=0.3, m0_bias=np.arange(5.0))
    np.testing.assert_allclose(bias_iterate_bound(spec, 0), spec.m0_bias)
    np.testing.assert_array_equal(variance_iterate_bound(spec, 0), np.zeros(5))
    np.testing.assert_array_equal(bias_iterate_bound(spec.with_(m0_bias=None), 40), np.zeros(5))


def test_variance_iterate_bound_limit():
    """eta sigma^2 / (1 - eta alpha Tr H) = 0.1 / 0.8 for large t"""
    spec = scalar_spec(eta=0.1, sigma2=1.0)
    assert variance_iterate_bound(spec, 10_000)[0] == pytest.approx(0.125)


def test_iterate_bounds_dominate_exact_tracks():
    """Both iterate bounds dominate the exact tracks elementwise for t <= 200"""
    rng = np.random.default_rng(3)
    for _ in range(15):
        d = int(rng.choice([1, 3, 8]))
        spec = spec_from_fraction(make_spectrum("power_law", d, exponent=float(rng.uniform(0.5, 2.0))),
                                  float(rng.uniform(0.1, 1.0)), batch=int(rng.choice([1, 2, 8])),
                                  sigma2=float(rng.uniform(0, 1)), m0_bias=rng.uniform(0, 1, d))
        traj = evolve_split(spec, 200)
        for t in range(0, 201, 5):
            assert np.all(traj.bias[t] <= bias_iterate_bound(spec, t) + 1e-12)
            assert np.all(traj.variance[t] <= variance_iterate_bound(spec, t) + 1e-12)


def test_ct_sum_check_trivial_cases():
    """Zero offset gives (0, 0); k = 1 has an empty coupling sum"""
    spec = spec_from_fraction(make_spectrum("power_law", 4), 0.5)
    assert ct_sum_check(spec, 10) == (0.0, 0.0)
    lhs, rhs = ct_sum_check(spec.with_(m0_bias=np.ones(4)), 1)
    assert lhs == 0.0
    assert rhs >= 0.0


def test_mass_certificates_hold():
    """Coupling sum and bias-mass drop stay below their bounds"""
    rng = np.random.default_rng(4)
    for _ in range(100):
        d = int(rng.choice([1, 2, 5, 10]))
        spec = spec_from_fraction(make_spectrum("random", d, low=0.01, high=1.0, seed=int(rng.integers(1000))),
                                  float(rng.uniform(0.1, 1.0)), batch=int(rng.choice([1, 4])),
                                  m0_bias=rng.uniform(0, 1, d))
        for k in (1, 2, 10, 100):
            lhs, rhs = ct_sum_check(spec, k)
            assert lhs <= rhs + 1e-12
            lhs, rhs = mass_drop_check(spec, k)
            assert lhs <= rhs + 1e-12


def test_lower_bound_examples():
    """Zero problem gives zeros; the scalar variance lower bound is k*/N"""
    spec = ProblemSpec(spectrum=make_spectrum("power_law", 3), sigma2=0.0, eta=0.05)
    report = lower_bound_diagnostic(spec, TailWindow(0, 10))
    assert (report.bias_lb, report.variance_lb) == (0.0, 0.0)
    assert report.diagnostic_only

    report = lower_bound_diagnostic(scalar_spec(sigma2=1.0), TailWindow(s=0, N=100))
    assert report.variance_lb == pytest.approx(0.01)
    assert report.to_dict()["total"] == report.bias_lb + report.variance_lb


def test_sharpness_gap_on_large_power_law():
    """Upper bound sits strictly above the constant-1 lower bound on a power-law instance"""
    spectrum = make_spectrum("power_law", 1000, exponent=1.0)
    spec = spec_from_fraction(spectrum, 0.5, sigma2=0.1, m0_bias=rank_one_uniform_bias(1.0, 1000))
    window = TailWindow(s=10_000, N=10_000)
    exact = tail_excess_exact(evolve_split(spec, window.last), window)
    report = sharpness_gap(spec, window, exact=exact)
    assert report.lower_total < report.upper_total
    assert report.ratio > 1.0
    assert 0.1 < report.cross_identity_share <= 1.0
    assert 0.0 < report.fitted_constant <= 1.0
    assert report.exact_excess == exact
