import pytest

_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def accept():
    """Record one acceptance line: ``accept("A1", ok, "detail")``."""

    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[name] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda s: int(s[1:])):
        terminalreporter.write_line(_ACCEPTANCE[name])
