import sys
from pathlib import Path

import pytest

from ioda.wire import TRACE

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

# (criterion number, title, passed, detail), filled in by test_acceptance
ACCEPTANCE: list = []


@pytest.fixture(autouse=True)
def no_data_before_auth():
    """Every wire in every test must finish mutual auth before moving data."""
    before = len(TRACE.violations)
    yield
    fresh = TRACE.violations[before:]
    assert not fresh, f"data frames crossed a wire before mutual auth: {fresh}"


@pytest.fixture
def scenarios_dir():
    return SCENARIOS


def pytest_collection_modifyitems(session, config, items):
    # acceptance runs last so its wire-trace check covers every earlier test
    items.sort(key=lambda item: item.path.name == "test_acceptance.py")


def pytest_sessionfinish(session, exitstatus):
    if TRACE.violations and session.exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    tr = terminalreporter
    if ACCEPTANCE:
        tr.section("acceptance criteria")
        for number, title, passed, detail in sorted(ACCEPTANCE):
            tr.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
    tr.write_line(
        f"wire trace: {TRACE.frames} frames, {TRACE.data_frames} data frames, "
        f"{len(TRACE.violations)} sent or accepted before mutual auth"
    )
