import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record():
    """Log one pass/fail line per acceptance criterion and assert it."""
    def _record(num, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2} {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
