from pathlib import Path

import pytest

from skelmgr.graph import Farm, Pipeline, Seq
from skelmgr.sim import Resource

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"


def case_pipeline(workers=None):
    return Pipeline([Seq("s1", 1.0), Farm(Seq("w", 4.0), workers), Seq("s3", 0.5)])


def mixed_pool(trusted=4, untrusted=8):
    return ([Resource(f"t{i}", "trusted") for i in range(1, trusted + 1)]
            + [Resource(f"u{i}", "untrusted") for i in range(1, untrusted + 1)])


@pytest.fixture
def scenario_dir():
    return SCENARIOS


# acceptance criteria report ----------------------------------------------------

ACCEPTANCE: dict = {}


def pytest_runtest_makereport(item, call):
    crit = item.get_closest_marker("criterion")
    if crit is None or call.when != "call":
        return
    number, title = crit.args
    ok = call.excinfo is None
    prev = ACCEPTANCE.get(number, (title, True))
    ACCEPTANCE[number] = (title, prev[1] and ok)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
