import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adapterfusion.backbone import BackboneConfig, init_backbone

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def tiny_cfg():
    return BackboneConfig(vocab_size=16, max_seq_len=8, hidden_dim=8, num_layers=2, num_heads=2, ffn_dim=16)


@pytest.fixture
def tiny_theta(tiny_cfg):
    return init_backbone(tiny_cfg, 0)


@pytest.fixture
def tokens():
    rng = np.random.default_rng(0)
    t = rng.integers(4, 16, size=(3, 6))
    t[:, 0] = 2
    t[2, 4:] = 0
    return t


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def report(criterion: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
