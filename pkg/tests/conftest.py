import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)
torch.set_default_dtype(torch.float32)

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and getattr(mod, "REPORT", None):
            terminalreporter.section("acceptance criteria")
            for line in mod.REPORT:
                terminalreporter.write_line(line)
