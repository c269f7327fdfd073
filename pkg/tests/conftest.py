import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> PASS/FAIL line, filled by test_acceptance and echoed in the summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
