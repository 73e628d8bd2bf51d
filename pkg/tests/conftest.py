import threading

import pytest
from hypothesis import HealthCheck, settings

from workfwd.comm import CommConfig, InProcessWorld, create_communicator

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def spmd(num_ranks, fn, timeout_ms=5000):
    """Run fn(rank, comm) on in-process threads; return per-rank value or exception."""
    world = InProcessWorld(num_ranks)
    out = [None] * num_ranks

    def body(rank):
        try:
            comm = create_communicator(
                CommConfig("in_process", num_ranks, rank, timeout_ms=timeout_ms), world=world)
        except Exception as exc:
            out[rank] = exc
            return
        try:
            out[rank] = fn(rank, comm)
        except Exception as exc:
            out[rank] = exc
        finally:
            comm.close()

    threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in range(num_ranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout_ms / 1000 * 4 + 10)
    return out


@pytest.fixture
def run_spmd():
    return spmd


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
