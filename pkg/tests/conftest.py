import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# acceptance criterion number -> (status, title, detail)
ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion():
    def record(number: int, title: str, passed: bool, detail: str = ""):
        ACCEPTANCE[number] = ("PASS" if passed else "FAIL", title, detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d} {status}  {title}" + (f"  ({detail})" if detail else ""))
