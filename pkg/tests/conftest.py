import pytest

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line; call with the measured detail and the verdict."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_ACCEPTANCE]
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
