import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, after capture ends."""
    import acceptance_report

    failed = [
        rep.nodeid.split("::")[-1]
        for rep in terminalreporter.stats.get("failed", [])
        if "test_acceptance.py" in rep.nodeid
    ]
    if not acceptance_report.LINES and not failed:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_report.LINES:
        terminalreporter.write_line(line)
    for name in failed:
        terminalreporter.write_line(f"ACCEPTANCE {name}: FAIL")
