import numpy as np
import pytest

from radseg.geometry import RadarGeometry
from radseg.simulate import generate_world, render_frame


@pytest.fixture(scope="session")
def small_geometry():
    """Smallest geometry compatible with object placement and the detector."""
    return RadarGeometry(range_bins=32, angle_bins=32, doppler_bins=16)


@pytest.fixture(scope="session")
def desk_geometry():
    return RadarGeometry()


@pytest.fixture(scope="session")
def small_frame(small_geometry):
    scene = generate_world(7, 2, small_geometry)
    return render_frame(scene, small_geometry, noise_seed=42)


@pytest.fixture(scope="session")
def desk_frame(desk_geometry):
    scene = generate_world(3, 4, desk_geometry)
    return render_frame(scene, desk_geometry, noise_seed=42)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
