"""Shared pytest hooks: one PASS/FAIL line per acceptance criterion."""

import pytest

ACCEPTANCE_RESULTS = {}


class Recorder:
    """Collects sub-check outcomes per criterion; a criterion passes only if all do."""

    def check(self, criterion: int, name: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE_RESULTS.setdefault(criterion, []).append((name, bool(ok), detail))
        return bool(ok)


@pytest.fixture(scope="session")
def acceptance():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_RESULTS):
        checks = ACCEPTANCE_RESULTS[crit]
        status = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        failed = [f"{name} ({detail})" for name, ok, detail in checks if not ok]
        note = "; failed: " + ", ".join(failed) if failed else f"; {len(checks)} checks"
        terminalreporter.write_line(f"CRITERION {crit}: {status}{note}")
