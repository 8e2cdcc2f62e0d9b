import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import verdicts  # noqa: E402

SUITE_BUDGET_SECONDS = 300.0
_START = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    if not verdicts.LINES:
        return
    elapsed = time.perf_counter() - _START
    ok = elapsed < SUITE_BUDGET_SECONDS
    verdicts.record("10b", "test suite runtime", ok, f"{elapsed:.1f}s (budget {SUITE_BUDGET_SECONDS:.0f}s)",
                    echo=False)
    if not ok:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in verdicts.LINES:
            terminalreporter.write_line(line)
