"""Per-criterion pass/fail summary for tests marked ``criterion(n)``."""

import pytest

CRITERIA = {
    1: "published-number statement and report format",
    2: "gradient oracle under 60 s",
    3: "fused beats no-fusion on reversal",
    4: "loss curve falls then levels off",
    5: "metric oracles",
    6: "structural invariants",
    7: "split exactness",
}

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or n not in _outcomes:
        _outcomes[n] = _outcomes.get(n, True) and not failed


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if _outcomes[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {CRITERIA.get(n, '')}")
