from dataclasses import replace

import numpy as np
import pytest

from persopt import sha, testbed
from persopt.design import sobol_points
from persopt.gp import Dataset, Domain, GPConfig, fit_model
from persopt.sha import ShaConfig, ShaRunError

SQ = testbed.get("sq")
F1 = testbed.get("f1")


def _cfg(**kw):
    base = dict(variant="sha2", n0=6, alpha=0.5, budget=9, seed=1)
    base.update(kw)
    return ShaConfig(**base)


def test_config_validation():
    dom = SQ.domain
    for bad in (dict(variant="sha3"), dict(n0=3), dict(alpha=0.0), dict(alpha=1.0), dict(budget=5), dict(stop_mode="x")):
        with pytest.raises(ValueError):
            _cfg(**bad).validate(dom)


def test_initial_design_is_first_sobol_points():
    dom = Domain(1, 2, lower=[0, -1, 0], upper=[2, 1, 1])
    X = sha.initial_design(dom, 5)
    np.testing.assert_array_equal(X, dom.lower + sobol_points(3, 5) * dom.width)


@pytest.mark.parametrize("variant", ["sha1", "sha2"])
def test_budget_run_uses_exactly_the_budget(variant):
    box = testbed.MeteredBlackBox(F1, 11)
    state, trace = sha.run(box, _cfg(variant=variant, budget=11), F1.domain)
    assert box.count == 11 == state.n
    assert len(trace) == 1 + 5 and [e.iteration for e in trace] == list(range(6))
    # monotone growth, points in the box, no near duplicates
    np.testing.assert_array_equal(state.data.points[:6], sha.initial_design(F1.domain, 6))
    assert F1.domain.contains(state.data.points).all()


def test_budget_equal_to_n0_stops_before_any_step():
    state, trace = sha.run(F1, _cfg(budget=6), F1.domain)
    assert state.n == 6 and len(trace) == 1


def test_runs_are_deterministic():
    a, ta = sha.run(F1, _cfg(), F1.domain)
    b, tb = sha.run(F1, _cfg(), F1.domain)
    np.testing.assert_array_equal(a.data.points, b.data.points)
    np.testing.assert_array_equal(a.model.theta, b.model.theta)
    assert [e.acquisition for e in ta[1:]] == [e.acquisition for e in tb[1:]]


def test_sha1_t_choice_ignores_responses():
    X = sha.initial_design(F1.domain, 8)
    y = F1(X[:, :1], X[:, 1:])
    rng = np.random.default_rng(0)
    picks = []
    for yy in (y, rng.permutation(y), -y):
        data = Dataset(X, yy, F1.domain)
        picks.append(sha.select_t_sha1(sha.ShaState(data, fit_model(data))))
    np.testing.assert_array_equal(picks[0], picks[1])
    np.testing.assert_array_equal(picks[0], picks[2])


def _dense_sq_model(n=40):
    X = sobol_points(2, n)
    return fit_model(Dataset(X, SQ(X[:, :1], X[:, 1:]), SQ.domain))


def test_alpha_one_degenerates_to_mean_minimization():
    model = _dense_sq_model(15)
    T = np.linspace(0, 1, 9)[:, None]
    S1, _ = sha.profile_lcb_min_batch(model, T, 1.0)
    np.testing.assert_array_equal(S1, sha.estimate_pos_batch(model, T))


def test_estimated_pos_on_dense_data():
    model = _dense_sq_model()
    assert sha.estimate_pos(model, [0.3])[0] == pytest.approx(0.3, abs=0.05)


def test_lower_bound_profile_matches_grid_oracle():
    model = _dense_sq_model(12)
    t = 0.62
    s, L = sha.profile_lcb_min(model, [t], 0.3)
    g = np.linspace(0, 1, 20001)[:, None]
    grid_L = model.lower_bound(np.column_stack([g, np.full_like(g, t)]), 0.3)
    assert L <= grid_L.min() + 1e-9
    assert L == pytest.approx(model.lower_bound([s[0], t], 0.3)[0], abs=1e-9)


def test_pos_invariant_under_affine_responses():
    X = sobol_points(2, 14)
    y = F1(X[:, :1], X[:, 1:])
    cfg = GPConfig(optimize=False, theta=[3.0, 2.0])
    m1 = fit_model(Dataset(X, y, F1.domain), cfg)
    m2 = fit_model(Dataset(X, 2.5 * y + 7.0, F1.domain), cfg)
    T = np.linspace(0, 1, 7)[:, None]
    np.testing.assert_allclose(sha.estimate_pos_batch(m1, T), sha.estimate_pos_batch(m2, T), atol=1e-5)


def test_sha2_picks_t_with_largest_profile_sd():
    X = sha.initial_design(F1.domain, 8)
    data = Dataset(X, F1(X[:, :1], X[:, 1:]), F1.domain)
    state = sha.ShaState(data, fit_model(data))
    t = sha.select_t_sha2(state, 0.5)
    T = np.linspace(0, 1, 401)[:, None]
    S, _ = sha.profile_lcb_min_batch(state.model, T, 0.5)
    sd_grid = state.model.mean_sd(np.column_stack([S, T]))[1]
    s_t, _ = sha.profile_lcb_min(state.model, t, 0.5)
    sd_pick = state.model.mean_sd(np.concatenate([s_t, t]))[1][0]
    assert sd_pick >= sd_grid.max() * (1 - 1e-3)


def test_duplicate_acquisition_falls_back_to_next_candidate(monkeypatch):
    X = sha.initial_design(SQ.domain, 6)
    data = Dataset(X, SQ(X[:, :1], X[:, 1:]), SQ.domain)
    state = sha.ShaState(data, fit_model(data))
    taken = X[0]

    ranked = sha._Ranked(np.array([taken[1:], [0.123]]), np.array([2.0, 1.0]))
    monkeypatch.setattr(sha, "_rank_sha1", lambda st: ranked)
    real = sha.profile_lcb_min

    def colliding(model, t, *a, **k):
        if np.allclose(t, taken[1:]):
            return taken[:1].copy(), 0.0
        return real(model, t, *a, **k)

    monkeypatch.setattr(sha, "profile_lcb_min", colliding)
    new = sha.step(state, SQ, _cfg(variant="sha1", n0=6, budget=7))
    assert new.history[-1].t_next[0] == 0.123
    assert new.n == 7


def test_stop_rules_examples(monkeypatch):
    inf = float("inf")
    state, trace = sha.run(F1, _cfg(stop_mode="integral", eps1=inf, eps2=inf, budget=20), F1.domain)
    assert state.iteration == 2  # the rule is eligible after two completed iterations
    state, _ = sha.run(F1, _cfg(stop_mode="maximum", eps1=inf, eps2=inf, budget=20), F1.domain)
    assert state.iteration == 2
    # consecutive snapshots agreeing to 1e-12 with negligible sd stop under 1e-6 thresholds
    cfg = _cfg(stop_mode="integral", eps1=1e-6, eps2=1e-6, budget=30)
    st = sha.start(F1, cfg, F1.domain)
    st.iteration = 3
    snap = np.full(len(st.stop_grid), 2.0)
    monkeypatch.setattr(sha, "pos_snapshot", lambda m, g, c: (snap + 1e-12, np.full(len(g), 1e-12)))
    chk = sha.check_stop(st, snap, cfg)
    assert chk.stop and chk.reason == "integral"
    assert not sha.check_stop(st, snap + 1.0, cfg).stop


def test_stop_denominator_floor(monkeypatch):
    cfg = _cfg(stop_mode="maximum", eps1=1e-3, eps2=1.0, budget=30)
    st = sha.start(F1, cfg, F1.domain)
    st.iteration = 5
    zero = np.zeros(len(st.stop_grid))
    monkeypatch.setattr(sha, "pos_snapshot", lambda m, g, c: (zero, zero))
    chk = sha.check_stop(st, zero + 1e-14, cfg)
    assert np.isfinite(chk.rel_change) and chk.stop


def test_failure_carries_partial_trace():
    calls = {"n": 0}

    def flaky(s, t):
        calls["n"] += 1
        if calls["n"] > 8:
            raise RuntimeError("simulator crashed")
        return F1(s, t)

    with pytest.raises(ShaRunError) as info:
        sha.run(flaky, _cfg(budget=12), F1.domain)
    assert info.value.state.n == 8
    assert len(info.value.trace) == 3


def test_multidimensional_run():
    f5 = testbed.get("f5")
    state, _ = sha.run(f5, replace(_cfg(), n0=8, budget=10), f5.domain)
    assert state.n == 10 and f5.domain.contains(state.data.points).all()
