import pytest

# (number, title, passed, detail) for each acceptance criterion that ran
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line, then assert on it."""
    def _verdict(n: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE.append((n, title, bool(ok), detail))
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return _verdict


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
