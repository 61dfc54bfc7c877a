import pytest
import torch

from iag.diffengine import set_precision


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    set_precision(64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(autouse=True)
def _default_f32():
    torch.set_default_dtype(torch.float32)
    yield
    torch.set_default_dtype(torch.float32)
    torch.set_grad_enabled(True)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance summary")
        for line in LINES:
            terminalreporter.write_line(line)
