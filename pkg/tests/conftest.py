import pytest

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


@pytest.fixture
def verdict():
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
