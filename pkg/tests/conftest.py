import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the run summary."""
    from contextlib import contextmanager

    @contextmanager
    def check(number, title):
        detail = {}
        try:
            yield detail
        except BaseException:
            ACCEPTANCE_LINES.append(f"AC{number:<2} FAIL  {title}  {detail.get('info', '')}")
            raise
        ACCEPTANCE_LINES.append(f"AC{number:<2} PASS  {title}  {detail.get('info', '')}")

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[2:4])):
            terminalreporter.write_line(line.rstrip())
