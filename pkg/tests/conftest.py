import numpy as np
import pytest

from vidtag.frames import TempGeoConfig
from vidtag.georefiner import GeoRefinerConfig
from vidtag.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**overrides):
    """Small widths for fast gradient and shape tests."""
    base = dict(d_clip=4, d_dino=4, embed_dim=8, tempgeo=TempGeoConfig(width=8, heads=2, ff_mult=2),
                proj_hidden=(12, 10), rff_dim=6, loc_hidden=10,
                refiner=GeoRefinerConfig(width=8, heads=2, ff_mult=2))
    base.update(overrides)
    return ModelConfig(**base)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.ACCEPTANCE:
            terminalreporter.write_line(line)
