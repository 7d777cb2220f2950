import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dpr.data import SceneSpec, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def scene():
    return generate_scene(SceneSpec(image_size=(112, 112), n_objects=5, rng_seed=7))
