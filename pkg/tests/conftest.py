import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wmforge.presets import benchmark_model  # noqa: E402
from wmforge.schedule import NoiseSchedule  # noqa: E402


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule.linear()


@pytest.fixture(scope="session")
def bench():
    return benchmark_model()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
