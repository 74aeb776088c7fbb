import pytest
import torch

from gdpose.config import Config

TINY = [
    "data.image_height=32",
    "data.image_width=32",
    "model.widths=[8,8,16,16]",
    "diffusion.heads=2",
    "diffusion.vector_blocks=1",
]


def tiny_config(*extra: str) -> Config:
    return Config().with_overrides(TINY + list(extra))


@pytest.fixture
def tiny():
    return tiny_config()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record():
    """Record one acceptance verdict line; printed in the terminal summary."""

    def _record(criterion: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def float64():
    """Run a test with float64 as torch's default dtype, restoring the old one after."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
