import numpy as np
import pytest
from hypothesis import settings

from graphsplat.core import GaussianCloud, ScanGeometry, uniform_angles

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

BOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def random_cloud(rng, m, spread=0.4, scale=(0.08, 0.25), rho=(0.2, 1.0), box=BOX):
    rot = rng.normal(size=(m, 4))
    return GaussianCloud(
        rho=rng.uniform(*rho, size=m),
        position=rng.uniform(-spread, spread, size=(m, 3)),
        scale=rng.uniform(*scale, size=(m, 3)),
        rotation=rot / np.linalg.norm(rot, axis=1, keepdims=True),
        bbox=box,
    )


def small_geometry(mode="parallel", views=4, rows=16, cols=18):
    if mode == "parallel":
        return ScanGeometry("parallel", rows, cols, 2.4 / cols, uniform_angles(views))
    return ScanGeometry("cone", rows, cols, 4.8 / cols, uniform_angles(views),
                        source_to_axis=4.0, axis_to_detector=4.0)


def central_difference(f, x, h):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
