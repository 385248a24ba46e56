"""Shared fixtures. Designs are expensive (LMI line search), so they are
computed once per session."""

import numpy as np
import pytest

from markov_empc import compute_profile, design_terminal_ingredients, fixtures


@pytest.fixture(scope="session")
def scalar_design():
    sys = fixtures.scalar_mjls()
    prof = compute_profile(sys)
    return sys, prof, design_terminal_ingredients(sys, prof, delta_cap=0.5)


@pytest.fixture(scope="session")
def economic_design():
    sys, storage = fixtures.scalar_economic()
    prof = compute_profile(sys)
    return sys, storage, prof, design_terminal_ingredients(sys, prof, delta_cap=0.5, storage=storage)


@pytest.fixture(scope="session")
def two_state_design():
    sys = fixtures.two_state_mjls()
    prof = compute_profile(sys)
    return sys, prof, design_terminal_ingredients(sys, prof, delta_cap=0.5)


@pytest.fixture(scope="session")
def two_state_economic_design():
    sys, storage = fixtures.two_state_economic()
    prof = compute_profile(sys)
    return sys, storage, prof, design_terminal_ingredients(sys, prof, delta_cap=0.5, storage=storage)


@pytest.fixture(scope="session")
def nonlinear_design():
    sys = fixtures.nonlinear_scalar()
    prof = compute_profile(sys)
    return sys, prof, design_terminal_ingredients(sys, prof, delta_cap=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ----------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion at the end of the run

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    details = [v for k, v in item.user_properties if k == "detail"]
    prev = _ACCEPTANCE.get(number)
    passed = report.passed and (prev is None or prev[1])
    _ACCEPTANCE[number] = (title, passed, details if prev is None else prev[2] + details)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, details = _ACCEPTANCE[number]
        line = f"{'PASS' if passed else 'FAIL'}  {number:2d}. {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
