import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mapfuse.model import ModelConfig

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(**kw) -> ModelConfig:
    base = dict(C=8, H=6, W=10, N_q=4, D=16, P=4, n=4, N=2, head_hidden=8, dtype="float64",
                x_max=6.0, y_max=3.6)
    base.update(kw)
    return ModelConfig(**base)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
