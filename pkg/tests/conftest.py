import pytest

# criterion number -> (ok, detail); filled in by test_acceptance
VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    def record(n: int, ok: bool, detail: str = "") -> None:
        VERDICTS[n] = (bool(ok), detail)
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: trains desk models on three seeds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark and rep.failed and mark.args[0] not in VERDICTS:
        # errored before reaching its verdict (e.g. in a fixture)
        VERDICTS[mark.args[0]] = (False, f"error in {rep.when}: {call.excinfo.typename if call.excinfo else ''}")
