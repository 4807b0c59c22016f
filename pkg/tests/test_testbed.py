import numpy as np
import pytest

from oracles import branin
from persopt import testbed
from persopt.design import sobol_points
from persopt.testbed import BudgetExhausted, MeteredBlackBox, TestFunction, evaluate, metered


def test_dimensions():
    dims = {k: (f.p, f.q) for k, f in testbed.REGISTRY.items()}
    assert dims == {"sq": (1, 1), "f1": (1, 1), "f2": (1, 1), "f3": (1, 1), "f4": (1, 1), "f5": (2, 2), "f6": (4, 2)}


def test_point_values():
    assert evaluate("f1", [0], [0]) == 0.0
    assert evaluate("f2", [0], [0]) == 1.0
    assert evaluate("f3", [0], [0]) == 3.0
    assert evaluate("f4", [(5 + np.pi) / 15], [2.275 / 15]) == pytest.approx(0.397887, abs=1e-6)
    assert evaluate("f5", [1, 1], [0, 0]) == 2.0
    assert evaluate("sq", [0.25], [0.75]) == 0.25


def test_f1_formula():
    s, t = 0.3, 0.7
    assert evaluate("f1", [s], [t]) == pytest.approx(2 * abs(s**3 - t) + np.exp(t) * (s - 2 * t) ** 2, rel=1e-15)


def test_f3_is_the_lower_of_two_planes():
    X = sobol_points(2, 500)
    s, t = X[:, 0], X[:, 1]
    expected = np.minimum(3 - 2 * s + 3 * t, 3 + 2 * s - t)
    np.testing.assert_array_equal(testbed.get("f3")(X[:, :1], X[:, 1:]), expected)


def test_f4_is_mapped_branin():
    rng = np.random.default_rng(7)
    s, t = rng.random(1000), rng.random(1000)
    np.testing.assert_allclose(testbed.get("f4")(s[:, None], t[:, None]), branin(15 * s - 5, 15 * t), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("fid", list(testbed.REGISTRY))
def test_finite_and_deterministic_on_probe_points(fid):
    f = testbed.get(fid)
    X = sobol_points(f.domain.d, 100_000)
    a = f(X[:, : f.p], X[:, f.p :])
    assert a.shape == (100_000,) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, f(X[:, : f.p], X[:, f.p :]))


def test_scalar_and_batch_agree():
    f = testbed.get("f6")
    X = sobol_points(6, 5)
    batch = f(X[:, :4], X[:, 4:])
    assert [f(x[:4], x[4:]) for x in X] == list(batch)
    assert isinstance(f(X[0, :4], X[0, 4:]), float)


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate("f1", [1.5], [0.0])
    with pytest.raises(ValueError):
        evaluate("f5", [0.1], [0.1])
    with pytest.raises(KeyError):
        testbed.get("f9")
    with pytest.raises(ValueError):
        testbed.get("f1")([0.1, 0.2], [0.1])


def test_register_user_function():
    f = TestFunction("user-linear", 1, 1, lambda s, t: s[..., 0] + t[..., 0])
    testbed.register(f)
    try:
        assert evaluate("user-linear", [0.25], [0.5]) == 0.75
        with pytest.raises(ValueError):
            testbed.register(f)
    finally:
        del testbed.REGISTRY["user-linear"]


def test_metering():
    box = MeteredBlackBox(testbed.get("f1"), 3)
    for k in range(3):
        metered(box, [0.1], [0.2])
        assert box.count == k + 1
    assert box.remaining == 0
    with pytest.raises(BudgetExhausted):
        box([0.1], [0.2])
    assert box.count == 3
    with pytest.raises(BudgetExhausted):
        MeteredBlackBox(testbed.get("f1"), 0)([0.0], [0.0])


def test_metering_is_atomic_across_threads():
    from concurrent.futures import ThreadPoolExecutor

    box = MeteredBlackBox(testbed.get("sq"), 500)

    def call(_):
        try:
            box([0.5], [0.5])
            return 1
        except BudgetExhausted:
            return 0

    with ThreadPoolExecutor(8) as pool:
        ok = sum(pool.map(call, range(800)))
    assert ok == 500 and box.count == 500
