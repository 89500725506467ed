"""Nested-expectation model: payoff law, pool coupling, sigma rules."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from admlmc.errors import ConfigurationError
from admlmc.nested import (
    SIGMA_FLOOR,
    TRUE_PROBABILITY,
    NestedCoupling,
    NestedModelSpec,
    NestedProblem,
    NestedState,
    conditional_mean,
    conditional_variance,
    inner_payoff_batch,
    model_inner_payoff,
    sample_sigma,
)
from admlmc.refine import RefinementParams, correction_sample
from admlmc.streams import derive_stream
from toys import FixedStream


def test_payoff_at_origin_is_offset():
    # Y = 0, Y0 = 0 kill both stochastic terms
    assert model_inner_payoff(0.0, FixedStream([0.0, 123.0])) == -0.0805


def test_payoff_matches_formula_for_known_normals():
    x = model_inner_payoff(1.5, FixedStream([0.7, -0.4]))
    want = 0.02 * (1.5**2 - 0.7**2) + 7.0 * math.sqrt(2.0) / 25.0 * 1.5 * (-0.4) - 0.0805
    assert math.isclose(x, want, rel_tol=1e-15)


def test_conditional_mean_against_monte_carlo():
    for i, y in enumerate((0.0, 1.0, -2.0)):
        draws = inner_payoff_batch(y, derive_stream(100 + i, (0,)), 10**6)
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        assert abs(draws.mean() - conditional_mean(y)) <= 4 * se
    assert conditional_mean(0.0) == pytest.approx(-0.1005)


def test_conditional_variance_against_monte_carlo():
    for i, y in enumerate((0.0, 0.5, 1.0, 2.0, 3.0)):
        draws = inner_payoff_batch(y, derive_stream(200 + i, (0,)), 10**5)
        v = draws.var(ddof=1)
        # standard error of the sample variance from the fourth moment
        m4 = np.mean((draws - draws.mean()) ** 4)
        se = math.sqrt(max(m4 - v * v, 0.0) / draws.size)
        assert abs(v - conditional_variance(y)) <= 4 * se
    assert conditional_variance(1.0) == pytest.approx(0.0008 + 0.1568)


def test_true_probability_closed_form():
    # conditional mean crosses zero at Y^2 = 0.1005 / 0.02
    assert TRUE_PROBABILITY == pytest.approx(2.0 * ndtr(-math.sqrt(0.1005 / 0.02)), rel=1e-15)
    assert abs(TRUE_PROBABILITY - 0.025) < 1e-3
    y = derive_stream(7, (0,)).normals(10**6)
    hit = np.mean(0.02 * (y * y - 1.0) - 0.0805 >= 0.0)
    se = math.sqrt(TRUE_PROBABILITY * (1 - TRUE_PROBABILITY) / y.size)
    assert abs(hit - TRUE_PROBABILITY) <= 4 * se


def test_inner_schedule_counts():
    spec = NestedModelSpec(n0=16, gamma=1.0)
    assert [spec.inner_count(k) for k in range(4)] == [16, 32, 64, 128]
    assert NestedModelSpec(n0=16, gamma=2.0).inner_count(2) == 256
    assert spec.default_c() == pytest.approx(0.75)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        NestedModelSpec(n0=1)
    with pytest.raises(ConfigurationError):
        NestedModelSpec(gamma=0.0)
    with pytest.raises(ConfigurationError):
        NestedModelSpec(sigma_constant=-1.0)


def _fresh_coupling(seed=3, spec=None):
    problem = NestedProblem(spec)
    return problem, problem.start_coupling(derive_stream(seed, (0, 0)))


def _oracle_prefix(seed, y_unused, n):
    """Recompute the first n pool draws from a clone of the coupling stream."""
    clone = derive_stream(seed, (0, 0))
    y = float(clone.normals(1)[0])
    z = clone.normals(2 * n).reshape(n, 2)
    x = 0.02 * (y * y - z[:, 0] ** 2) + 7.0 * math.sqrt(2.0) / 25.0 * y * z[:, 1] - 0.0805
    return y, x


def test_init_state_matches_two_pass_oracle():
    problem, coupling = _fresh_coupling(seed=3)
    state = problem.init_state(coupling, 3, None)
    assert state.n_used == 128 and state.cost == 128.0
    y, x = _oracle_prefix(3, coupling.y, 128)
    assert y == coupling.y
    assert math.isclose(state.value, float(np.mean(x)), rel_tol=1e-12)
    assert math.isclose(state.sigma, float(np.std(x, ddof=1)), rel_tol=1e-12)


def test_refine_extends_and_matches_scratch():
    problem, coupling = _fresh_coupling(seed=9)
    s0 = problem.init_state(coupling, 0, None)
    assert s0.n_used == 16
    s1 = problem.refine_state(s0, coupling, None)
    assert s1.n_used == 32 and s1.cost - s0.cost == 16.0
    _, x = _oracle_prefix(9, coupling.y, 32)
    assert math.isclose(s1.value, float(np.mean(x)), rel_tol=1e-12)
    assert math.isclose(s1.sigma, float(np.std(x, ddof=1)), rel_tol=1e-12)


@given(st.integers(min_value=0, max_value=2**32), st.integers(min_value=0, max_value=3))
@settings(max_examples=25, deadline=None)
def test_refine_path_equals_direct_init(seed, ell):
    problem_a, coupling_a = _fresh_coupling(seed=seed)
    state = problem_a.init_state(coupling_a, ell, None)
    state = problem_a.refine_state(state, coupling_a, None)
    state = problem_a.refine_state(state, coupling_a, None)
    problem_b, coupling_b = _fresh_coupling(seed=seed)
    direct = problem_b.init_state(coupling_b, ell + 2, None)
    assert state == direct


def test_coarse_reads_prefix_of_fine_pool():
    problem, coupling = _fresh_coupling(seed=5)
    fine = problem.init_state(coupling, 3, None)
    coarse = problem.init_state(coupling, 2, None)
    _, x = _oracle_prefix(5, coupling.y, 128)
    assert math.isclose(coarse.value, float(np.mean(x[:64])), rel_tol=1e-12)
    assert coupling.pool_size == 128  # shared pool, no second generation
    # refining the coarse leg to the fine total level collides exactly
    assert problem.refine_state(coarse, coupling, None) == fine


def test_equal_total_levels_cancel_through_engine():
    problem = NestedProblem()
    params = RefinementParams(r=1.95, theta=1.0, c=0.75, gamma=1.0)
    collided = 0
    for i in range(200):
        s = correction_sample(problem, 3, 0, params, derive_stream(60, (0, i)))
        assert s.delta_h in (-1, 0, 1)
        if 3 + s.eta_fine == 2 + s.eta_coarse:
            collided += 1
            assert s.delta_h == 0
    assert collided > 0


class _Recording:
    """Wraps a problem to capture every state handed to the engine."""

    def __init__(self, inner):
        self.inner = inner
        self.events = []

    def start_coupling(self, stream):
        return self.inner.start_coupling(stream)

    def init_state(self, coupling, level, stream):
        s = self.inner.init_state(coupling, level, stream)
        self.events.append(("init", s))
        return s

    def refine_state(self, state, coupling, stream):
        s = self.inner.refine_state(state, coupling, stream)
        self.events.append(("refine", s))
        return s


def test_pair_cost_counts_both_leg_prefixes():
    params = RefinementParams(r=1.95, theta=1.0, c=0.75, gamma=1.0)
    spec = NestedModelSpec()
    for i in range(50):
        rec = _Recording(NestedProblem(spec))
        s = correction_sample(rec, 2, 0, params, derive_stream(61, (0, i)))
        # the fine leg runs to completion before the coarse leg starts
        inits = [j for j, (kind, _) in enumerate(rec.events) if kind == "init"]
        assert len(inits) == 2
        fine_total = rec.events[inits[1] - 1][1].n_used
        coarse_total = rec.events[-1][1].n_used
        assert s.cost == fine_total + coarse_total
        assert fine_total == spec.inner_count(2 + s.eta_fine)
        assert coarse_total == spec.inner_count(1 + s.eta_coarse)


def test_sigma_constant_mode():
    problem, coupling = _fresh_coupling(seed=2, spec=NestedModelSpec(sigma_constant=0.2814))
    for level in (0, 2):
        assert problem.init_state(coupling, level, None).sigma == 0.2814


def test_sigma_floor_on_degenerate_draws():
    assert sample_sigma(2, 0.0) == SIGMA_FLOOR
    with pytest.raises(ConfigurationError):
        sample_sigma(1, 0.0)


def test_sample_sigma_tracks_analytic_conditional_std():
    spec = NestedModelSpec()
    coupling = NestedCoupling(1.0, derive_stream(77, (0,)), spec)
    state = NestedProblem(spec)._state_at(coupling, 13)  # 131072 draws
    assert abs(state.sigma - math.sqrt(conditional_variance(1.0))) \
        <= 0.01 * math.sqrt(conditional_variance(1.0))
