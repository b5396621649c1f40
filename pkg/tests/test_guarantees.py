import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dovis.guarantees import (
    BoundReport,
    SybilScenario,
    avoiding_set_kernel,
    check_contraction_trajectory,
    check_fused_bound,
    check_monotone,
    check_perturbation,
    check_usage_sandwich,
    dumps_witness,
    fused_sybil_bound,
    inject_success,
    injection_trajectory,
    into_set_kernel,
    max_row_l1,
    pumped_sybil_kernels,
    random_kernel,
    random_prior,
    random_snapshot,
    run_suite,
)
from dovis.kernels import StochasticKernel, UtilityWeights, build_kernels, uniform
from dovis.rank import RankHyperparams, closed_form_rank, fixed_point
from dovis.telemetry import DecayParams, SufficientStats, fold_decay

N, S, A = 100, np.arange(10), 0.85
U = uniform(N)


def test_bound_report_holds_iff():
    assert BoundReport("x", 1.0, 1.0).holds
    assert BoundReport("x", 1.0 + 5e-11, 1.0).holds
    r = BoundReport("x", 1.0 + 1e-9, 1.0, witness={"a": 1})
    assert not r.holds and r.witness == {"a": 1}
    assert BoundReport("x", 0.0, 1.0, witness={"a": 1}).witness is None
    assert r.line().split() == ["x", repr(1.0 + 1e-9), "1.0", "false", "1e-10"]


def test_all_into_clique_is_tight_upper():
    x = closed_form_rank(into_set_kernel(N, S), A, U)
    scn = SybilScenario(S, x, U, A, 0.5, U)
    assert scn.x_S == pytest.approx(0.865, abs=1e-10)
    lo, hi = check_usage_sandwich(scn)
    assert lo.holds and hi.holds
    assert abs(hi.rhs - hi.lhs) <= 1e-10


def test_isolated_clique_is_tight_lower():
    x = closed_form_rank(avoiding_set_kernel(N, S), A, U)
    scn = SybilScenario(S, x, U, A, 0.5, U)
    assert scn.x_S == pytest.approx(0.015, abs=1e-10)
    lo, hi = check_usage_sandwich(scn)
    assert lo.holds and hi.holds
    assert abs(lo.rhs - lo.lhs) <= 1e-10


def test_fused_bound_example_value():
    # exact rational arithmetic under the square roots, then one float sqrt
    head = math.sqrt(Fraction(865, 1000) * Fraction(1, 10))
    floor = math.sqrt(Fraction(15, 100) * Fraction(1, 100) * Fraction(9, 10))
    oracle = head / (head + floor)
    assert fused_sybil_bound(0.85, 0.5, 0.1, 0.01, 0.1) == pytest.approx(oracle, abs=1e-14)
    assert oracle == pytest.approx(0.8889, abs=5e-5)


def test_fused_bound_holds_on_pumped_clique():
    x = closed_form_rank(into_set_kernel(N, S), A, U)
    y = U.copy()
    rep = check_fused_bound(SybilScenario(S, x, y, A, 0.5, U))
    assert rep.holds
    assert rep.rhs == pytest.approx(fused_sybil_bound(0.85, 0.5, 0.1, 0.01, 0.1))


def test_fused_bound_preconditions():
    x = closed_form_rank(into_set_kernel(N, S), A, U)
    with pytest.raises(ValueError):
        check_fused_bound(SybilScenario(S, x, U, A, 0.0, U))
    y = np.full(N, 1e-15)
    y[S] = (1 - 90e-15) / 10
    with pytest.raises(ValueError):
        check_fused_bound(SybilScenario(S, x, y, A, 0.5, U))


def test_scenario_rejects_trivial_cliques():
    with pytest.raises(ValueError):
        SybilScenario([], U, U, A, 0.5, U)
    with pytest.raises(ValueError):
        SybilScenario(np.arange(N), U, U, A, 0.5, U)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.25, 0.5, 0.75, 1.0]))
def test_sybil_bounds_on_random_scenarios(seed, p):
    rng = np.random.default_rng(seed)
    n = 40
    P, Q, clique = pumped_sybil_kernels(n, int(rng.integers(1, 11)), rng)
    u = uniform(n)
    x, y = closed_form_rank(P, A, u), closed_form_rank(Q, A, u)
    scn = SybilScenario(clique, x, y, A, p, u)
    assert all(r.holds for r in check_usage_sandwich(scn))
    if scn.y_S <= 0.9:
        assert check_fused_bound(scn).holds


def test_identity_kernel_trajectory():
    v = random_prior(8, np.random.default_rng(2))
    K = StochasticKernel.from_dense(np.eye(8))
    x0 = np.roll(v, 3)
    res = fixed_point(K, A, v, x0=x0, record=True)
    np.testing.assert_allclose(closed_form_rank(K, A, v), v, atol=1e-15)
    assert check_contraction_trajectory(K, A, v, res.iterates).holds


def test_near_cyclic_kernel_trajectory():
    n = 30
    M = 0.999 * np.roll(np.eye(n), 1, axis=1) + 0.001 / n
    K = StochasticKernel.from_dense(M)
    v = random_prior(n, np.random.default_rng(5))
    res = fixed_point(K, A, v, record=True)
    assert check_contraction_trajectory(K, A, v, res.iterates).holds
    assert np.abs(res.vector - np.linalg.solve(np.eye(n) - A * M.T, (1 - A) * v)).sum() <= 1e-9


def test_perturbation_identical_kernels():
    K = random_kernel(20, np.random.default_rng(0))
    rep = check_perturbation(K, K, A, uniform(20))
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.holds


def test_perturbation_single_row():
    rng = np.random.default_rng(9)
    n = 15
    for _ in range(100):
        M = rng.dirichlet(np.ones(n), size=n)
        Mt = M.copy()
        Mt[int(rng.integers(n))] = rng.dirichlet(np.ones(n))
        delta = max_row_l1(M, Mt)
        rep = check_perturbation(StochasticKernel.from_dense(M), StochasticKernel.from_dense(Mt), A, uniform(n))
        assert rep.holds and rep.rhs == pytest.approx(A / (1 - A) * delta)


def test_perturbation_halflife_change():
    rng = np.random.default_rng(3)
    n = 20
    log = [random_snapshot(n, 1, rng, edges=40) for _ in range(6)]

    def rebuild(H):
        decay = DecayParams.from_half_life(H)
        agg: dict = {}
        for snap in log:
            agg = fold_decay(agg, snap, decay)
        return build_kernels(agg, UtilityWeights(), uniform(n), uniform(n))[0]

    for H, Ht in ((4, 8), (8, 16), (2, 32)):
        assert check_perturbation(rebuild(H), rebuild(Ht), A, uniform(n)).holds


def test_perturbation_dimension_mismatch():
    with pytest.raises(ValueError):
        check_perturbation(random_kernel(3, np.random.default_rng(0)), random_kernel(4, np.random.default_rng(0)), A, uniform(3))


def test_inject_zero_and_positive():
    snap = random_snapshot(10, 1, np.random.default_rng(1))
    key = next(iter(snap))
    u = uniform(10)
    traj = injection_trajectory(snap, key, 0, UtilityWeights(), (u, u), RankHyperparams(), task=key[2])
    assert traj.shape == (1,)
    after = inject_success(snap, key, 2.0)
    s0, s1 = snap[key], after[key]
    assert s1.N == s0.N + 2 and s1.S == s0.S + 2
    assert s1.sum_l / s1.N == pytest.approx(s0.sum_l / s0.N)
    fresh = inject_success({}, (0, 1, 0))[(0, 1, 0)]
    assert fresh == SufficientStats(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone_injection(seed):
    rng = np.random.default_rng(seed)
    n = 15
    snap = random_snapshot(n, 2, rng)
    key = list(snap)[int(rng.integers(len(snap)))]
    u = uniform(n)
    traj = injection_trajectory(snap, key, 4, UtilityWeights(), (u, u), RankHyperparams(), task=key[2])
    assert check_monotone(traj).holds
    assert np.all(np.diff(traj) >= -1e-12)


def test_check_monotone_flags_drop():
    assert not check_monotone([0.1, 0.2, 0.15]).holds


def test_suite_default_holds():
    reports = run_suite({"trials": 5})
    assert reports and all(r.holds for r in reports)
    names = {r.name for r in reports}
    assert {"contraction", "closed_form_agreement", "coldstart_floor", "perturbation",
            "sybil_usage_lower", "sybil_usage_upper", "sybil_fused", "monotonicity"} <= names


def test_suite_corrupt_kernel_reports_witness():
    reports = run_suite({"trials": 2, "sizes": [10], "families": ["contraction"]}, corrupt=True)
    bad = [r for r in reports if not r.holds]
    assert len(bad) == 1 and bad[0].name == "row_stochastic"
    doc = json.loads(dumps_witness(bad[0]))
    assert doc["witness"]["n"] == 10 and len(doc["witness"]["row_sums"]) == 10
    assert doc["lhs"] == pytest.approx(0.1)


def test_suite_config_errors():
    with pytest.raises(ValueError):
        run_suite({"trials": 0})
    with pytest.raises(ValueError):
        run_suite({"families": ["nope"]})
