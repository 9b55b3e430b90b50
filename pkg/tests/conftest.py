import contextlib
import time

import pytest
import torch

# single-threaded kernels keep float reductions in a fixed order across runs
torch.set_num_threads(1)

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Context manager that records one PASS/FAIL line for an acceptance criterion.

    The body appends short measurement notes to the yielded list; any exception
    marks the criterion failed and propagates. Exceeding ``budget_s`` also fails.
    """

    @contextlib.contextmanager
    def check(number: int, title: str, budget_s: float):
        notes: list[str] = []
        start = time.perf_counter()
        passed = False
        try:
            yield notes
            elapsed = time.perf_counter() - start
            assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s:g}s"
            passed = True
        finally:
            elapsed = time.perf_counter() - start
            detail = f" | {'; '.join(notes)}" if notes else ""
            line = f"{'PASS' if passed else 'FAIL'} [{number:>2}] {title} ({elapsed:.1f}s < {budget_s:g}s){detail}"
            request.config.stash.setdefault(_ACCEPTANCE, {})[number] = line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
