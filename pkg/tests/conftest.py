"""Make the sibling oracle helpers importable and summarize acceptance runs."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

# (number, outcome, text) rows recorded by the acceptance tests; printed as a
# one-line-per-criterion scoreboard after the normal pytest summary.
CRITERION_RESULTS: dict[int, tuple[str, str]] = {}


def record_criterion(number: int, outcome: str, text: str) -> None:
    CRITERION_RESULTS[number] = (outcome, text)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERION_RESULTS):
        outcome, text = CRITERION_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {outcome} - {text}")
