import numpy as np
import pytest

from persopt import gp

# acceptance results, printed in the terminal summary: (criterion, passed, detail)
ACCEPTANCE: list = []

# every model fitted anywhere in the session is checked for exact interpolation
INTERPOLATION_LOG: dict = {"models": 0, "worst_mean": 0.0, "worst_sd": 0.0}


def interpolation_errors(model):
    """Training-point mean error and sd, both relative to the response range."""
    y = model.data.responses
    scale = max(float(np.ptp(y)), float(np.max(np.abs(y))) * 1e-12, np.finfo(float).tiny)
    mean, sd = model.mean_sd(model.data.points)
    return float(np.max(np.abs(mean - y)) / scale), float(np.max(sd) / scale)


def pytest_addoption(parser):
    parser.addoption("--slow", action="store_true", default=False, help="run the extended suite (f5, f6 reproduction)")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: extended suite, needs --slow")
    original = gp.GpModel._from_gls.__func__

    def recording(cls, *args, **kwargs):
        model = original(cls, *args, **kwargs)
        if np.isfinite(model.sigma2) and model.sigma2 > 0:
            e_mean, e_sd = interpolation_errors(model)
            INTERPOLATION_LOG["models"] += 1
            INTERPOLATION_LOG["worst_mean"] = max(INTERPOLATION_LOG["worst_mean"], e_mean)
            INTERPOLATION_LOG["worst_sd"] = max(INTERPOLATION_LOG["worst_sd"], e_sd)
        return model

    gp.GpModel._from_gls = classmethod(recording)


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="extended suite; run with --slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key, passed, detail in sorted(ACCEPTANCE, key=lambda r: str(r[0])):
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def acceptance():
    """Record one criterion outcome and fail the test when it does not hold."""

    def record(key, passed, detail):
        ACCEPTANCE.append((key, bool(passed), detail))
        print(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
        assert passed, detail

    return record
