import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from highway_v2v.simulation import HighwayConfig


@pytest.fixture
def small_config():
    """Fast-to-simulate world used across tests."""
    return HighwayConfig(num_cars=4, max_steps=120, length_range=(120.0, 160.0))


@pytest.fixture
def full_config():
    return HighwayConfig()
