import pytest

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line per acceptance check; repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def _report(n, name, ok, detail, elapsed, note=None):
        line = f"[{'PASS' if ok else 'FAIL'}] AC{n} {name}: {detail} ({elapsed:.1f} s)"
        if note:
            line += f"\n        note: {note}"
        lines.append((n, line))
        print("\n" + line)

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance checks")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
