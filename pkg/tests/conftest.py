"""Shared fixtures: taxonomies and a small scene sized for fast training."""

import numpy as np
import pytest

from hcrnet.cli import bundled_taxonomy_path
from hcrnet.hierarchy import Taxonomy, load_taxonomy
from hcrnet.model import ModelConfig
from hcrnet.synthetic import default_scene_spec, synthesize_scene


@pytest.fixture(scope="session")
def amazon_taxonomy():
    return load_taxonomy(bundled_taxonomy_path())


@pytest.fixture(scope="session")
def tiny_taxonomy():
    # oak, pine -> trees -> veg; lake, river -> wet -> water
    return Taxonomy(
        macro_names=["veg", "water"],
        intermediate_names=["trees", "wet"],
        micro_names=["oak", "pine", "lake", "river"],
        micro_parent=[0, 0, 1, 1],
        intermediate_parent=[0, 1],
    )


@pytest.fixture(scope="session")
def tiny_config():
    # schedule 5 -> 4 -> 3 -> 2 -> 1, cheap enough for training in tests
    return ModelConfig(timesteps=5, channels=2, patch_size=6, stem_filters=4,
                       block_filters=(4, 6, 6), temporal_kernel=2,
                       spatial_kernel=3)


@pytest.fixture(scope="session")
def tiny_scene(tiny_taxonomy):
    """(cube, labels) for a 36x36 four-class scene matching tiny_config."""
    spec = default_scene_spec(tiny_taxonomy, [0.4, 0.3, 0.2, 0.1],
                              timesteps=5, channels=2, height=36, width=36,
                              noise_sigma=0.3, blob_scale=5.0)
    cube, labels = synthesize_scene(spec, seed=11)
    assert np.unique(labels).size == 4
    return cube, labels
