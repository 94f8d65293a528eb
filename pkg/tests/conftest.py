import numpy as np
import pytest

from distill_lab.renderer import SamplingConfig
from distill_lab.scene import (
    CANONICAL_MASK_BOX,
    build_scene,
    canonical_dataset,
    canonical_ring,
    canonical_spec,
    generate_dataset,
)
from distill_lab.trainer import TrainConfig

TINY_VIEWS = (1, 4)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Six 24x24 views of the canonical layout on a 12^3 lattice."""
    spec = canonical_spec((12, 12, 12))
    sampling = SamplingConfig(n_samples=24, near=1.0, far=5.0, clip_to_bbox=True)
    return generate_dataset(build_scene(spec), canonical_ring(6, 24), CANONICAL_MASK_BOX, sampling,
                            target_grid=build_scene(spec, False))


@pytest.fixture
def tiny_config():
    return TrainConfig(iterations=6, lr=0.05, batch_size=64, eval_views=TINY_VIEWS, eval_every=3, log_every=2,
                       checkpoint_every=3, distill_resolution=16,
                       sampling=SamplingConfig(n_samples=16, near=1.0, far=5.0, clip_to_bbox=True))


@pytest.fixture(scope="session")
def canonical(tmp_path_factory):
    """The full canonical dataset, generated once per session."""
    return canonical_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
