#!/usr/bin/env python3
"""
Test Exact Engine
Tests the diagonal recursion, the bias/variance split and the tail-averaged risks
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from src.problem import ProblemSpec, TailWindow, make_spectrum, spec_from_fraction
from src.services.exact_engine import (
    RecursionCoefficients,
    StateVector,
    build_operators,
    evolve,
    evolve_split,
    excess_risk_of_m,
    pointwise_risks,
    risk_of_m,
    step_m,
    tail_excess_exact,
    tail_risk_exact,
    tail_risk_upper_bound,
    variance_fixed_point,
)
from src.utils.errors import InvalidArgumentError, StabilityViolationError


def scalar_spec(eta=0.1, sigma2=0.0, batch=1, m0=1.0, lam=1.0):
    return ProblemSpec(spectrum=make_spectrum("explicit", 1, values=[lam]), sigma2=sigma2, eta=eta,
                       batch=batch, m0_bias=np.array([m0]))


def random_specs(count, seed=0, max_d=8):
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(count):
        d = int(rng.choice([1, 2, 4, max_d]))
        spectrum = make_spectrum("power_law", d, exponent=float(rng.uniform(0.5, 2.0)))
        specs.append(spec_from_fraction(spectrum, float(rng.uniform(0.1, 1.0)), batch=int(rng.choice([1, 2, 4])),
                                        sigma2=float(rng.uniform(0.0, 1.0)), m0_bias=rng.uniform(0, 1, d)))
    return specs


def test_step_m_scalar_examples():
    """Scalar recursion: 1 - 2 eta + 2 eta^2 + eta^2 at b = 1"""
    spec = scalar_spec()
    assert step_m(StateVector(np.array([1.0]), 0), spec).m[0] == pytest.approx(0.83)

    noisy = scalar_spec(sigma2=1.0, m0=0.0)
    stepped = step_m(StateVector(np.array([0.0]), 3), noisy)
    assert stepped.m[0] == pytest.approx(0.01)
    assert stepped.t == 4


def test_step_m_zero_is_noiseless_fixed_point():
    """m = 0 stays at 0 without noise"""
    spec = ProblemSpec(spectrum=make_spectrum("power_law", 5), sigma2=0.0, eta=0.05)
    np.testing.assert_array_equal(step_m(StateVector(np.zeros(5), 0), spec).m, np.zeros(5))


def test_step_m_dimension_mismatch():
    """State and spec dimensions must agree"""
    with pytest.raises(InvalidArgumentError):
        step_m(StateVector(np.zeros(3), 0), scalar_spec())


def test_state_vector_rejects_negative_entries():
    """Diagonal of a PSD matrix is non-negative"""
    with pytest.raises(InvalidArgumentError):
        StateVector(np.array([1.0, -0.1]), 0)


def test_evolve_matches_repeated_steps():
    """evolve rows equal repeated step_m applications bit for bit"""
    for spec in random_specs(6, seed=3) + [scalar_spec(eta=0.3, batch=4, sigma2=1.0)]:
        rows = evolve(spec, 20)
        state = StateVector(spec.m0_bias, 0)
        for t in range(20):
            state = step_m(state, spec)
            np.testing.assert_array_equal(rows[t + 1], state.m)


def test_step_m_stays_non_negative_unclipped():
    """Every diagonal coefficient is positive, so steps keep m >= 0 even past the stable step size"""
    spec = scalar_spec(eta=1.0, batch=64, sigma2=0.0)
    state = StateVector(np.array([1.0]), 0)
    for _ in range(10):
        state = step_m(state, spec)
        assert state.m[0] > 0.0


def test_zero_spectrum_evolves_to_zero():
    """An all-zero spectrum is stable and its risk never moves off zero excess"""
    spec = ProblemSpec(spectrum=make_spectrum("uniform", 2, value=0.0), sigma2=1.0, eta=0.1,
                       m0_bias=np.array([0.3, 0.7]))
    assert spec.stable
    traj = evolve_split(spec, 3)
    np.testing.assert_array_equal(traj.bias, np.tile(spec.m0_bias, (4, 1)))
    np.testing.assert_array_equal(traj.variance, np.zeros((4, 2)))
    assert tail_excess_exact(traj, TailWindow(1, 2)) == 0.0


def test_evolve_split_initial_conditions():
    """T = 0 gives (m0_bias, 0); sigma2 = 0 keeps the variance track at zero"""
    spec = random_specs(1, seed=1)[0]
    traj = evolve_split(spec, 0)
    assert traj.T == 0
    np.testing.assert_array_equal(traj.state(0).bias.m, spec.m0_bias)
    np.testing.assert_array_equal(traj.state(0).variance.m, np.zeros(spec.d))

    quiet = evolve_split(spec.with_(sigma2=0.0), 30)
    np.testing.assert_array_equal(quiet.variance, np.zeros((31, spec.d)))
    assert len(quiet.states) == 31


def test_split_tracks_add_up_to_unsplit_evolution():
    """Bias track + variance track equals the unsplit recursion"""
    for spec in random_specs(10, seed=11):
        traj = evolve_split(spec, 50)
        np.testing.assert_allclose(traj.total, evolve(spec, 50), rtol=1e-12, atol=0)


def test_risk_of_m_examples():
    """Risk is 1/2 <lambda, m> + sigma^2 / 2"""
    spec = ProblemSpec(spectrum=make_spectrum("explicit", 2, values=[4.0, 3.0]), sigma2=0.0, eta=0.01)
    assert risk_of_m(np.array([2.0, 1.0]), spec) == pytest.approx(5.5)
    assert risk_of_m(np.zeros(2), spec.with_(sigma2=1.0)) == pytest.approx(0.5)

    spec = random_specs(1, seed=5)[0]
    expected = 0.5 * np.dot(spec.lambdas, spec.m0_bias) + 0.5 * spec.sigma2
    assert risk_of_m(StateVector(spec.m0_bias, 0), spec) == pytest.approx(expected)
    assert excess_risk_of_m(spec.m0_bias, spec) == pytest.approx(expected - 0.5 * spec.sigma2)


def test_pointwise_risks_columns():
    """Total excess equals bias excess + variance excess at every t"""
    traj = evolve_split(random_specs(1, seed=8)[0], 25)
    risks = pointwise_risks(traj)
    assert set(risks) == {"excess_risk", "bias_excess", "variance_excess"}
    np.testing.assert_allclose(risks["excess_risk"], risks["bias_excess"] + risks["variance_excess"], rtol=1e-12)


def brute_force_tail_excess(traj, window):
    """(1/2N^2) sum_k lambda_k sum_{i,j} E[delta_i^k delta_j^k] with the (1 - eta lambda)^{|i-j|} cross terms"""
    spec = traj.spec
    q = 1.0 - spec.eta * spec.lambdas
    total = traj.total
    acc = np.zeros(spec.d)
    for i in range(window.s, window.end):
        for j in range(window.s, window.end):
            earlier = min(i, j)
            acc += total[earlier] * q ** abs(i - j)
    return float(np.dot(spec.lambdas, acc)) / (2.0 * window.N ** 2)


def test_tail_risk_exact_matches_pairwise_sum():
    """Closed-form geometric weights agree with the explicit double sum"""
    for spec in random_specs(5, seed=21):
        window = TailWindow(s=5, N=12)
        traj = evolve_split(spec, window.last)
        np.testing.assert_allclose(tail_excess_exact(traj, window), brute_force_tail_excess(traj, window),
                                   rtol=1e-10)


def test_tail_risk_exact_single_iterate():
    """N = 1 reduces to the pointwise risk at t = s"""
    spec = random_specs(1, seed=2)[0]
    traj = evolve_split(spec, 40)
    window = TailWindow(s=17, N=1)
    assert tail_risk_exact(traj, window) == pytest.approx(risk_of_m(traj.total[17], spec), rel=1e-14)


def test_tail_risk_exact_at_optimum():
    """Starting at w* without noise gives zero risk"""
    spec = ProblemSpec(spectrum=make_spectrum("power_law", 4), sigma2=0.0, eta=0.05)
    traj = evolve_split(spec, 30)
    assert tail_risk_exact(traj, TailWindow(s=10, N=20)) == 0.0


def test_tail_risk_parts_and_short_trajectory():
    """Bias and variance parts add up; a short trajectory is rejected"""
    spec = random_specs(1, seed=4)[0]
    window = TailWindow(s=3, N=7)
    traj = evolve_split(spec, window.last)
    parts = tail_excess_exact(traj, window, "bias") + tail_excess_exact(traj, window, "variance")
    assert tail_excess_exact(traj, window) == pytest.approx(parts, rel=1e-12)
    with pytest.raises(InvalidArgumentError):
        tail_risk_exact(evolve_split(spec, window.last - 1), window)
    with pytest.raises(InvalidArgumentError):
        tail_excess_exact(traj, window, "momentum")


def test_tail_risk_upper_bound_scalar_example():
    """(1 / (eta N^2)) m0 (1 - (1 - eta lambda)^N) = 1 for the scalar case"""
    spec = scalar_spec()
    traj = evolve_split(spec, 0)
    assert tail_risk_upper_bound(traj, TailWindow(s=0, N=1)) == pytest.approx(1.0)


def test_tail_risk_upper_bound_dominates_exact():
    """The upper-bound expression is never below the exact tail risk"""
    for spec in random_specs(15, seed=31):
        for s, N in ((0, 1), (0, 10), (20, 30)):
            window = TailWindow(s, N)
            traj = evolve_split(spec, window.last)
            assert tail_risk_exact(traj, window) <= tail_risk_upper_bound(traj, window) + 1e-12


def test_tail_risk_upper_bound_refuses_unstable():
    """Unstable specs raise StabilityViolationError"""
    spec = scalar_spec(eta=0.5)
    assert not spec.stable
    with pytest.raises(StabilityViolationError):
        tail_risk_upper_bound(evolve_split(spec, 3), TailWindow(0, 2))


def test_build_operators_examples():
    """Scalar operators and the d = 2 off-diagonals"""
    ops = build_operators(scalar_spec())
    np.testing.assert_allclose(ops.A_exact, [[0.83]])
    np.testing.assert_allclose(ops.B, [[0.83]])
    np.testing.assert_allclose(ops.D, [[0.81]])

    spec = ProblemSpec(spectrum=make_spectrum("uniform", 2, value=1.0), sigma2=0.0, eta=0.1)
    ops = build_operators(spec)
    assert ops.A_exact[0, 1] == pytest.approx(0.01)
    assert ops.B[0, 1] == pytest.approx(0.02)
    assert ops.D[0, 1] == 0.0


def test_operator_ordering():
    """D <= A_exact <= B elementwise"""
    for spec in random_specs(20, seed=41):
        ops = build_operators(spec)
        assert np.all(ops.D <= ops.A_exact + 1e-15)
        assert np.all(ops.A_exact <= ops.B + 1e-15)


def test_stable_noiseless_risk_is_non_increasing():
    """<lambda, m~_t> never grows for stable specs without noise"""
    for spec in random_specs(10, seed=51):
        risks = pointwise_risks(evolve_split(spec.with_(sigma2=0.0), 200))["excess_risk"]
        assert np.all(np.diff(risks) <= 1e-15 * risks[:-1])


def test_unstable_spec_diverges():
    """eta = 3 / lambda_max makes the risk grow without bound"""
    spec = scalar_spec(eta=3.0)
    risks = pointwise_risks(evolve_split(spec, 200))["excess_risk"]
    assert risks[200] > risks[20] > risks[0]


def test_variance_fixed_point_matches_dense_solve_and_long_run():
    """Sherman-Morrison closed form agrees with a dense solve and with the recursion's limit"""
    for spec in random_specs(8, seed=61):
        ops = build_operators(spec)
        c = RecursionCoefficients.from_spec(spec)
        dense = np.linalg.solve(np.eye(spec.d) - ops.A_exact, c.noise_scale * spec.sigma2 * spec.lambdas)
        closed = variance_fixed_point(spec)
        np.testing.assert_allclose(closed, dense, rtol=1e-9, atol=1e-15)

    spec = scalar_spec(sigma2=1.0, m0=0.0)
    limit = evolve_split(spec, 2000).variance[-1]
    np.testing.assert_allclose(variance_fixed_point(spec), limit, rtol=1e-10)


def test_variance_fixed_point_zero_eigenvalue():
    """Zero eigen-directions get no noise"""
    spec = ProblemSpec(spectrum=make_spectrum("explicit", 3, values=[1.0, 0.5, 0.0]), sigma2=1.0, eta=0.1)
    assert variance_fixed_point(spec)[2] == 0.0


def test_variance_fixed_point_shrinks_with_batch_size():
    """At a fixed stable eta the stationary excess falls with b, roughly as 1/b"""
    spectrum = make_spectrum("power_law", 16, exponent=1.0)
    base = spec_from_fraction(spectrum, 0.5, batch=1, sigma2=1.0)
    batches = [1, 2, 4, 8, 64]
    excess = [float(np.sum(spectrum.lambdas * variance_fixed_point(base.with_(batch=b)))) for b in batches]
    assert all(later < earlier for earlier, later in zip(excess, excess[1:]))
    for b, value in zip(batches, excess):
        assert 1.0 / (2 * b) <= value / excess[0] <= 2.0 / b


def test_perturbed_coefficients_change_the_trajectory():
    """The negative-control perturbation only touches the quadratic coefficient"""
    spec = random_specs(1, seed=71)[0]
    c = RecursionCoefficients.from_spec(spec)
    bad = c.perturbed()
    assert bad.quadratic == pytest.approx(1.01 * c.quadratic)
    assert (bad.linear, bad.rank_one, bad.noise_scale) == (c.linear, c.rank_one, c.noise_scale)
    assert not np.allclose(evolve(spec, 50, coefficients=bad), evolve(spec, 50), rtol=1e-10, atol=0)
