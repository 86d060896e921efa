from collections import defaultdict

import pytest

_LINES = defaultdict(list)


@pytest.fixture
def report():
    """Record one check of an acceptance criterion: ``report(n, ok, detail)``."""
    def record(criterion: int, ok: bool, detail: str):
        _LINES[criterion].append((ok, detail))
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        checks = _LINES[n]
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} - " + "; ".join(d for _, d in checks))
