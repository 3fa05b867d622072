import pytest

LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criterion(pytestconfig):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = pytestconfig.stash.setdefault(LINES, [])

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"criterion {name:<5} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
