import numpy as np
import pytest

from synkpar import worker_engine
from synkpar.worker_engine import WorkerPool


@pytest.fixture
def make_pool():
    """Factory for pools that are always shut down after the test."""
    pools = []

    def make(world_size, **kwargs):
        kwargs.setdefault("barrier_timeout", 30.0)
        pool = WorkerPool(world_size, **kwargs)
        pools.append(pool)
        return pool

    yield make
    for p in pools:
        p.shutdown()


@pytest.fixture(autouse=True)
def _clean_session():
    yield
    worker_engine.shutdown()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One pass/fail line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES = {}


def pytest_runtest_logreport(report):
    crit = None
    for name, value in report.user_properties:
        if name == "criterion":
            crit = value
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        prev = ACCEPTANCE_LINES.get(crit)
        if prev is None or prev[0] == "PASS" or status == "FAIL":
            ACCEPTANCE_LINES[crit] = (status, report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_LINES, key=lambda c: int(c.split()[0])):
        status, _ = ACCEPTANCE_LINES[crit]
        terminalreporter.write_line(f"{status:4s}  criterion {crit}")
