import time

import pytest

CRITERIA = {
    1: "gradient truth across every loss term",
    2: "divergence identities",
    3: "consistency weight contract",
    4: "sparse residual bit-exactness",
    5: "sparse residual fidelity at <= 5% density",
    6: "distillation beats source-only and the strong teacher",
    7: "robustness to a permuted teacher",
    8: "FixMatch gating",
    9: "partial-set masking",
    10: "downstream parameter arithmetic",
    11: "byte-identical reruns",
    12: "acceptance suite wall time",
}

_outcomes: dict[int, list[bool]] = {}
_acceptance_clock: dict[str, float] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test covers")


def pytest_runtest_setup(item):
    if item.get_closest_marker("criterion") is not None:
        _acceptance_clock.setdefault("start", time.perf_counter())


@pytest.fixture(scope="session")
def acceptance_clock():
    return _acceptance_clock


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status:7s} {title} ({len(results or [])} checks)")
