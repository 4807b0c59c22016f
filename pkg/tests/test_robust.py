import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persopt import robust, testbed
from persopt.gp import Dataset, Domain, fit_model
from persopt.robust import CostGrid, PersonalizedDecision as PD

SQ = testbed.get("sq")
DOM = SQ.domain


def test_sq_costs_of_reference_decisions():
    poc = PD.oracle(lambda T: T.copy(), DOM)
    half, zero = PD.constant([0.5], DOM), PD.constant([0.0], DOM)
    assert robust.expected_cost(poc, SQ) == 0.0
    assert robust.max_cost(poc, SQ) == 0.0
    # midpoint rule error for a quadratic is exactly h^2 / 12 times the second derivative / 2
    h = 1 / 101
    assert robust.expected_cost(half, SQ) == pytest.approx(1 / 12 - h**2 / 12, abs=1e-14)
    assert robust.expected_cost(half, SQ) == pytest.approx(1 / 12, abs=1e-3)
    assert robust.expected_cost(zero, SQ) == pytest.approx(1 / 3, abs=1e-4)
    assert robust.max_cost(half, SQ) == 0.25
    assert robust.max_cost(zero, SQ) == 1.0


def test_sq_robust_solutions():
    ue = robust.solve_u_e(SQ)
    um = robust.solve_u_m(SQ)
    assert ue.s[0] == pytest.approx(0.5, abs=1e-8)
    assert um.s[0] == pytest.approx(0.5, abs=1e-8)
    assert um.value == pytest.approx(0.25, abs=1e-8)


def test_separable_cost_gives_the_s_minimizer_for_any_density():
    f = lambda S, T: (S[..., 0] - 0.37) ** 2 + np.sin(5 * T[..., 0])  # noqa: E731
    for dens in (None, lambda T: 2 * T[:, 0]):
        assert robust.solve_u_e(f, dens, domain=DOM).s[0] == pytest.approx(0.37, abs=1e-6)


def test_t_independent_cost_reduces_to_plain_minimization():
    f = lambda S, T: np.cos(3 * S[..., 0]) + 0 * T[..., 0]  # noqa: E731
    u = robust.solve_u_m(f, domain=DOM)
    assert u.s[0] == pytest.approx(1.0)
    assert u.value == pytest.approx(np.cos(3.0), abs=1e-12)


def _nested_grid(fid, reduce):
    f = testbed.get(fid)
    g = np.linspace(0, 1, 1001)
    vals = f(g[:, None, None], g[None, :, None])  # (s, t)
    per_s = np.trapezoid(vals, g, axis=1) if reduce == "mean" else vals.max(axis=1)
    return per_s.min()


def test_f3_expected_cost_solution_matches_nested_grid_oracle():
    f = testbed.get("f3")
    u = robust.solve_u_e(f)
    g = np.linspace(0, 1, 1001)
    value_at_u = np.trapezoid(f(np.broadcast_to(u.s, (1001, 1)), g[:, None]), g)
    assert value_at_u == pytest.approx(_nested_grid("f3", "mean"), abs=1e-3)


def test_f2_minimax_matches_nested_grid_oracle():
    u = robust.solve_u_m(testbed.get("f2"))
    assert u.value == pytest.approx(_nested_grid("f2", "max"), abs=1e-3)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 10), st.floats(-5, 5), st.floats(0, 1))
def test_expected_cost_is_linear_in_f(a, b, s):
    f1 = testbed.get("f1")
    g = lambda S, T: a * f1(S, T) + b  # noqa: E731
    u = PD.constant([s], DOM)
    assert robust.expected_cost(u, g, domain=DOM) == pytest.approx(a * robust.expected_cost(u, f1) + b, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("fid", ["f1", "f2", "f3", "f4"])
def test_grid_refinement_is_stable(fid):
    f = testbed.get(fid)
    u = robust.solve_u_e(f)
    coarse = robust.cost_estimate(u, f, CostGrid(101))
    fine = robust.cost_estimate(u, f, CostGrid(202))
    scale = 1 + abs(fine.expected)
    assert abs(coarse.expected - fine.expected) <= 2 * coarse.expected_error + 1e-9 * scale
    assert abs(coarse.expected - fine.expected) < 1e-3 * scale
    assert coarse.maximum == pytest.approx(fine.maximum, rel=1e-9)


def test_maximum_not_below_expected_for_uniform_density():
    for fid in ("f1", "f2", "f3", "f4"):
        f = testbed.get(fid)
        c = robust.cost_estimate(PD.constant([0.3], DOM), f)
        assert c.maximum >= c.expected


def test_monte_carlo_rule_above_two_environmental_dimensions():
    dom = Domain(1, 3)
    f = lambda S, T: (S[..., 0] - T[..., 0]) ** 2 + T[..., 1] * T[..., 2]  # noqa: E731
    u = PD.constant([0.5], dom)
    grid = CostGrid(mc_draws=20000, seed=5)
    c = robust.cost_estimate(u, f, grid, domain=dom)
    assert c.descriptor["rule"] == "monte-carlo"
    assert c.expected == pytest.approx(1 / 12 + 1 / 4, abs=4 * c.expected_error)
    assert c.expected == robust.cost_estimate(u, f, grid, domain=dom).expected


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_nearest_table_only_returns_stored_settings(ts):
    t_grid = np.linspace(0, 1, 11)
    s_vals = np.sin(np.arange(11.0)) ** 2
    u = PD.tabulated(t_grid, s_vals, DOM)
    out = u(np.array(ts)[:, None])[:, 0]
    assert set(out) <= set(s_vals)
    nearest = s_vals[np.argmin(np.abs(t_grid[None, :] - np.array(ts)[:, None]), axis=1)]
    np.testing.assert_array_equal(out, nearest)


def test_linear_table_and_bad_lookup():
    u = PD.tabulated([0.0, 1.0], [0.2, 0.6], DOM, lookup="linear")
    assert u([0.5])[0] == pytest.approx(0.4)
    dom2 = Domain(1, 2)
    T = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    u2 = PD.tabulated(T, T.sum(axis=1) / 2, dom2, lookup="linear")
    assert u2([0.5, 0.5])[0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        PD.tabulated([0.0], [0.1], DOM, lookup="cubic")


def test_decisions_must_stay_in_the_control_box():
    with pytest.raises(ValueError):
        PD.oracle(lambda T: T + 2.0, DOM)(np.array([[0.5]]))
    with pytest.raises(ValueError):
        PD.constant([0.5], DOM)(np.array([[0.1, 0.2]]))


def test_surrogate_decision_is_the_model_pos():
    from persopt.sha import estimate_pos_batch

    X = np.random.default_rng(1).random((25, 2))
    model = fit_model(Dataset(X, SQ(X[:, :1], X[:, 1:]), DOM))
    u = PD.surrogate(model)
    T = np.linspace(0, 1, 5)[:, None]
    np.testing.assert_array_equal(u(T), estimate_pos_batch(model, T))


def test_non_finite_cost_is_an_error():
    f = lambda S, T: np.where(T[..., 0] > 0.5, np.nan, 0.0)  # noqa: E731
    with pytest.raises(ValueError):
        robust.expected_cost(PD.constant([0.5], DOM), f, domain=DOM)


def test_pos_oracle_on_sq():
    pos = robust.pos_oracle(SQ)
    T = np.linspace(0, 1, 13)[:, None]
    np.testing.assert_allclose(pos(T), T, atol=1e-8)


@pytest.mark.parametrize("fid", ["sq", "f1", "f2", "f3", "f4"])
def test_dominance_chains(fid):
    f = testbed.get(fid)
    base = robust.robust_baselines(f)
    decisions = {"uE": base["uE"][0], "uM": base["uM"][0], "const": PD.constant([0.9], f.domain)}
    rep = robust.dominance_check(f, decisions)
    assert rep.ok, str(rep)
    if fid == "sq":
        assert rep.costs["pos"].expected == pytest.approx(0.0, abs=1e-12)
        assert rep.costs["uE"].expected == pytest.approx(1 / 12, abs=1e-3)
        assert rep.costs["uM"].maximum == pytest.approx(0.25, abs=1e-9)


def test_dominance_reports_violations_with_location():
    # a deliberately poor "optimum" loses to the constant decision somewhere
    bad = PD.constant([0.0], DOM)
    rep = robust.dominance_check(SQ, {"half": PD.constant([0.5], DOM)}, pos=bad)
    assert not rep.ok
    v = rep.violations[0]
    assert v.check.startswith("pointwise") and v.t is not None
    assert "VIOLATION" in str(rep)
