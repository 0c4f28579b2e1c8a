import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from _acceptance_log import LINES  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(LINES.items()):
            terminalreporter.write_line(line)
