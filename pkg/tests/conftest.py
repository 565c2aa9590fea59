import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL/SKIP line per acceptance criterion; returns whether it passed."""

    def record(number, title, ok, detail="", status=None):
        status = status or ("PASS" if ok else "FAIL")
        line = f"criterion {number}: {status} - {title}" + (f" [{detail}]" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
