import numpy as np
import pytest
from hypothesis import settings

from fuseforge.camera import PinholeIntrinsics
from fuseforge.synthetic import SdfPlane, SdfSphere
from fuseforge.volume import HashedTsdfVolume

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_intr():
    return PinholeIntrinsics(150.0, 150.0, 79.5, 59.5, 160, 120)


@pytest.fixture(scope="session")
def scene_shapes():
    """Back wall, floor and three spheres: enough structure to pin all 6 DOF."""
    return [SdfPlane((0, 0, -1), -2.5), SdfPlane((0, -1, 0), -0.6),
            SdfSphere((-0.4, 0.1, 1.8), 0.3), SdfSphere((0.5, -0.2, 2.0), 0.35),
            SdfSphere((0.1, 0.3, 1.4), 0.2)]


def sphere_volume(radius=0.5, voxel=0.01, center=(0.0, 0.0, 0.0)):
    """Volume holding the exact truncated SDF of a sphere."""
    vol = HashedTsdfVolume(voxel)
    tau = vol.truncation
    n = int(np.ceil((radius + 2 * tau) / voxel)) + 1
    g = np.stack(np.meshgrid(*[np.arange(-n, n + 1)] * 3, indexing="ij"), -1).reshape(-1, 3)
    g = g + np.round(np.asarray(center) / voxel).astype(int)
    sdf = np.linalg.norm(g * voxel - np.asarray(center), axis=1) - radius
    m = np.abs(sdf) <= tau
    vol.set_voxels(g[m], np.clip(sdf[m] / tau, -1, 1), 1.0)
    return vol


@pytest.fixture(scope="session")
def sphere_vol():
    return sphere_volume()
