import numpy as np
import pytest

from specloop.toylm import make_target


@pytest.fixture(scope="session")
def target():
    return make_target()


@pytest.fixture(scope="session")
def small_target():
    return make_target(vocab_size=20, hidden_dim=4, sparsity=3, n_clusters=2, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, ok, detail)``."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
