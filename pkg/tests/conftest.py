import pytest
import torch

from sslpurify.data import SyntheticSpec, generate_synthetic
from sslpurify.ssl_tasks import SslHeads, SslTrainingConfig, TaskId, make_head, pretrain_head


def trained_random_heads(width=4, seed=0, dtype=torch.float32) -> SslHeads:
    """Untrained heads flagged as trained: enough for contract tests that only need smooth losses."""
    heads = [make_head(t, width, seed + i) for i, t in enumerate(TaskId)]
    for h in heads:
        h.trained = True
        h.to(dtype)
    return SslHeads(*heads)


@pytest.fixture
def small_images():
    return generate_synthetic(SyntheticSpec(48, 16, 4, seed=3))


@pytest.fixture
def heads():
    return trained_random_heads()


@pytest.fixture
def heads64():
    return trained_random_heads(dtype=torch.float64)


@pytest.fixture(scope="session")
def pretrained_heads64():
    """Briefly trained 8x8 heads in double precision (realistic gradient scales for finite differences)."""
    data = generate_synthetic(SyntheticSpec(600, 8, 4, seed=1))
    cfg = SslTrainingConfig(epochs=3, width=8, batch_size=64)
    heads = SslHeads(*(pretrain_head(t, data, cfg, seed=0) for t in TaskId))
    return heads.to(torch.float64)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
