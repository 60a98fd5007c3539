from __future__ import annotations

import pytest

# nodeid -> (criterion number, title); filled at collection, outcomes at report time
_CRITERIA: dict[str, tuple[int, str]] = {}
_OUTCOMES: dict[str, tuple[str, float]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None and marker.args:
            _CRITERIA[item.nodeid] = (int(marker.args[0]), str(marker.args[1]))


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _OUTCOMES[report.nodeid] = (outcome, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (number, title) in sorted(_CRITERIA.items(), key=lambda kv: kv[1][0]):
        if nodeid in _OUTCOMES:
            outcome, duration = _OUTCOMES[nodeid]
            terminalreporter.write_line(f"criterion {number:2d}  {outcome}  {title}  ({duration:.2f} s)")


@pytest.fixture
def criterion_timer():
    """Asserts a wall-clock budget for the code under test."""
    import time

    class Timer:
        def __init__(self):
            self.elapsed = 0.0

        def __enter__(self):
            self._t0 = time.perf_counter()
            return self

        def __exit__(self, *exc):
            self.elapsed += time.perf_counter() - self._t0

    return Timer()
