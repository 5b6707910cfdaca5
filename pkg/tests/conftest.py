import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """Record an acceptance verdict: ``criterion(n, passed, detail)``."""

    def record(n, passed, detail=""):
        _RESULTS[n] = (bool(passed), detail)
        print(f"CRITERION {n}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
