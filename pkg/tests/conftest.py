import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from caat.data import generate_synthetic
from caat.vit import ViTConfig, build_model

settings.register_profile(
    "caat", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("caat")


# ~1.5k parameters: small enough for exhaustive finite differences
TINY = ViTConfig(image_size=8, channels=1, patch_size=4, dim=8, depth=1, heads=2,
                 mlp_ratio=2, num_classes=3, seed=0)
SMALL = ViTConfig(image_size=8, channels=3, patch_size=4, dim=16, depth=2, heads=2,
                  mlp_ratio=2, num_classes=2, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_store():
    return build_model(TINY)


@pytest.fixture
def small_store():
    return build_model(SMALL)


@pytest.fixture
def small_data():
    return generate_synthetic(per_class=16, image_size=8, channels=3, seed=0)


@pytest.fixture
def tiny_batch(rng):
    x = rng.random((4, TINY.channels, TINY.image_size, TINY.image_size))
    y = np.array([0, 1, 2, 1])
    return x, y


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[number])
