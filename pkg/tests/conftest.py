import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record the checks of one acceptance criterion and print a PASS/FAIL line.

    Usage: ``criterion(k, title, checks)`` where ``checks`` is a list of
    ``(label, ok, detail)``; the call fails the test if any check failed.
    """

    def record(k, title, checks):
        failed = [c for c in checks if not c[1]]
        status = "FAIL" if failed else "PASS"
        line = f"CRITERION {k}: {status} {title} ({len(checks) - len(failed)}/{len(checks)} checks)"
        if failed:
            line += "; failing: " + "; ".join(f"{lab} [{det}]" for lab, _, det in failed)
        print(line)
        request.config.stash[_LINES].append(line)
        assert not failed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
