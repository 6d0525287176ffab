import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatcache.scene import Camera, Scene, SphereLight, default_scene
from splatcache.volume import TransferFunction, constant_field

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def slab_scene(sigma_t=1.0, albedo=0.0, background=(0.5, 0.5, 0.5), lights=(), resolution=(4, 4), fov=1e-3, max_depth=32):
    """Unit-cube homogeneous medium viewed head-on along -z through its center."""
    field = constant_field((4, 4, 4), 1.0)
    tf = TransferFunction.constant(sigma_t, (albedo, albedo, albedo))
    cam = Camera(position=(0.5, 0.5, 3.0), look_at=(0.5, 0.5, 0.0), up=(0, 1, 0), vertical_fov=fov, resolution=resolution)
    return Scene(cam, list(lights), field, tf, np.asarray(background, dtype=np.float64), max_depth=max_depth)


@pytest.fixture
def absorbing_slab():
    return slab_scene(sigma_t=1.0, albedo=0.0)


@pytest.fixture(scope="session")
def small_scene():
    return default_scene((16, 16), dims=(32, 32, 32))


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
