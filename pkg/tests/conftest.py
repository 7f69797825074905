import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dsd.data import make_synthetic, split
from dsd.flow import TrainData
from dsd.network import InitSpec, Network, init, mlp_layers

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=50
)
settings.load_profile("default")


@pytest.fixture
def rings_data() -> TrainData:
    ds = make_synthetic("concentric_rings", 400, noise_std=0.1, seed=3)
    train, val, test = split(ds, (0.6, 0.2, 0.2), seed=0)
    return TrainData(train, val, test, batch_size=16)


@pytest.fixture
def small_net() -> Network:
    return init(Network(mlp_layers([2, 8, 8, 2])), InitSpec(seed=1))


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = f()
        flat[i] = saved - h
        down = f()
        flat[i] = saved
        gflat[i] = (up - down) / (2 * h)
    return g
