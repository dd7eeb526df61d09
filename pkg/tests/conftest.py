import sys
from pathlib import Path

# make tests/oracles.py importable regardless of the invocation directory
sys.path.insert(0, str(Path(__file__).parent))

from hypothesis import settings

# fixed example sequence so the suite gives the same verdict on every run
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
