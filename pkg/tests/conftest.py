import numpy as np
import pytest

from crowdmap.fixture import FixtureSpec, generate_fixture


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """A small deterministic synthetic corpus shared across test modules."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_fixture(root, FixtureSpec(n_images=6, image_size=128,
                                                  min_points=15, max_points=60, seed=7))
    return root, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(0)
