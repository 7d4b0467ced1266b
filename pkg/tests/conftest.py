import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_ACCEPTANCE: list = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict():
    """Record one acceptance line (printed in the terminal summary) and assert it."""

    def record(label: str, ok: bool, measured: str) -> None:
        _ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {label}: {measured}")
        assert ok, f"{label}: {measured}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
