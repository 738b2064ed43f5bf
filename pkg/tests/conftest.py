import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from alignadapt.config import TrainConfig
from alignadapt.synthetic import DatasetSpec, in_memory_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**overrides):
    base = dict(image_size=16, patch_size=4, d=16, depth=3, r=2, frames_per_clip=4, M=1,
                epochs=4, warmup_epochs=1, batch_size=8)
    base.update(overrides)
    return TrainConfig(**base)


def tiny_spec(**overrides):
    base = dict(n_entities=4, n_actions=4, n_unseen=1, samples_per_action=6, T=4, H=16, W=16,
                patch=4, seed=3)
    base.update(overrides)
    return DatasetSpec(**base)


@pytest.fixture(scope="session")
def tiny_data():
    return in_memory_dataset(tiny_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.ACCEPTANCE, key=lambda l: int(l.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
