import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cetus.events import GeneratorConfig, SensorGeometry, Trajectory, generate_stream  # noqa: E402
from cetus.model import init_weights  # noqa: E402
from cetus.spatial import SpatialHyperparams  # noqa: E402
from cetus.temporal import SsmHyperparams  # noqa: E402

SMALL_SP = SpatialHyperparams(k=6, dim=16, heads=4, tau=0.005)
SMALL_HP = SsmHyperparams(blocks=2, dim=16, state=4, dt_rank=2, conv_kernel=3)


def make_stream(seed=0, duration=0.02, bg=8000.0, target=3000.0, size=32):
    cfg = GeneratorConfig(
        geometry=SensorGeometry(size, size),
        duration=duration,
        background_rate=bg,
        target_rate=target,
        trajectory=Trajectory(start=(8.0, 8.0), velocity=(300.0, 200.0)),
        target_sigma=1.0,
        seed=seed,
    )
    return cfg.geometry, generate_stream(cfg)


def randomize(model, seed, scale=0.3):
    """Perturb every weight so no test relies on the structured init."""
    rng = np.random.default_rng(seed)
    vec = model.flatten()
    return model.unflatten(vec + scale * rng.standard_normal(vec.size))


@pytest.fixture
def small_model():
    return init_weights(SMALL_SP, SMALL_HP, seed=3)


@pytest.fixture
def stream32():
    return make_stream()
