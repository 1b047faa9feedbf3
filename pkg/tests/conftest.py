import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    """A few short videos: fast enough for end-to-end pipeline tests."""
    from gsmoe.data import SyntheticConfig, generate_synthetic
    cfg = SyntheticConfig(n_classes=3, videos_per_class=4, normal_videos=8,
                          test_videos_per_class=2, test_normal_videos=3, T_range=(24, 40),
                          anomaly_window_range=(4, 10), d_feat=8, seed=3)
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def tiny_train_config():
    from gsmoe.train import TrainConfig
    return TrainConfig(E1_mil=2, E1_tgs=2, E2=2, E3=2, d=8, D=16, batch_size=4, lr=1e-3)


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record one acceptance verdict; printed in the terminal summary."""
    line = f"CRITERION {criterion:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    _ACCEPTANCE[criterion] = line
    print(line)


_EXAMPLES = {}


def report_example(name: str, ok: bool, detail: str) -> None:
    line = f"EXAMPLE {'PASS' if ok else 'FAIL'} - {name}: {detail}"
    _EXAMPLES[name] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
    if _EXAMPLES:
        terminalreporter.section("measured examples")
        for line in _EXAMPLES.values():
            terminalreporter.write_line(line)
