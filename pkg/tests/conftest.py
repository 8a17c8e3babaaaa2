import pytest

from qemcmc import ising, quantum

# Criterion number -> (passed, detail); filled by tests/test_acceptance.py.
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    """Store a criterion outcome for the summary, then assert it."""

    def _record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_RESULTS[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return _record


@pytest.fixture(scope="session")
def paper10():
    return ising.paper_instance(10)


@pytest.fixture(scope="session")
def channel_q10(paper10):
    """Noiseless channel proposal matrix of the n=10 instance (a few minutes to build)."""
    return quantum.channel_q_matrix(paper10)


@pytest.fixture
def small_instance():
    return ising.gen_random_instance(4, "full", rng=7)
