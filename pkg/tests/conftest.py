import pytest
from threadpoolctl import threadpool_limits

ACCEPTANCE = []


def report(criterion: str, ok: bool, detail: str = "") -> bool:
    """Record one acceptance line; the caller still asserts on ``ok``."""
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  ({detail})" if detail else ""))
    return ok


@pytest.fixture(autouse=True, scope="session")
def single_thread_blas():
    # results are compared bit for bit, so keep BLAS reductions in a fixed order
    with threadpool_limits(1):
        yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
