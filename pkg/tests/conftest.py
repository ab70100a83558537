import pytest


class SimClock:
    """Millisecond clock under test control."""

    def __init__(self, start_ms: int = 0):
        self.now = start_ms

    def __call__(self) -> int:
        return self.now

    def advance(self, ms: int) -> int:
        self.now += ms
        return self.now


@pytest.fixture
def sim_clock():
    return SimClock()


# -- acceptance checklist reporting -------------------------------------------------
#
# Tests tagged @pytest.mark.criterion("<name>") get one PASS/FAIL/SKIP line in
# the terminal summary, so the release checklist can be read off a plain
# ``pytest -v`` run.

_CRITERIA: list[tuple[str, str, float, str]] = []  # (name, verdict, seconds, detail)
_NOTES: dict[str, str] = {}


def record_criterion_note(name: str, text: str) -> None:
    """Attach measured numbers to a criterion's summary line."""
    _NOTES[name] = text


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(name): one named line of the acceptance checklist",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # One record per test: the call phase, or the setup phase when it skipped
    # (skipif) or errored before the test body could run.
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.passed:
            verdict = "PASS"
        elif report.skipped:
            verdict = "SKIP"
        else:
            verdict = "FAIL"
        name = marker.args[0]
        detail = _NOTES.get(name, "")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]  # the skip reason
        _CRITERIA.append((name, verdict, report.duration, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    width = max(len(name) for name, _, _, _ in _CRITERIA)
    for name, verdict, seconds, detail in _CRITERIA:
        line = f"{verdict}  {name:<{width}}  {seconds:7.2f}s"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
