import numpy as np
import pytest

from chardistill.datagen import GenConfig, render_sample
from chardistill.imaging import ImageBuffer


def make_rng(seed=0):
    return np.random.default_rng(seed)


def crisp_gen_config(**overrides) -> GenConfig:
    """Noise-free rendering with saturated intensities, for exact oracles."""
    kwargs = dict(noise_sigma=0.0, fg_range=(1.0, 1.0), bg_range=(0.0, 0.0))
    kwargs.update(overrides)
    return GenConfig(**kwargs)


def sample_for(seed: int, cfg: GenConfig):
    return render_sample(np.random.default_rng(seed), cfg)


def gt_union(sample) -> np.ndarray:
    union = np.zeros(sample.gt_masks.masks[0].shape, dtype=np.uint8)
    for mask in sample.gt_masks.masks:
        union |= mask
    return union


def random_image(rng, height=8, width=12, channels=1) -> ImageBuffer:
    return ImageBuffer(rng.random((height, width, channels)))


@pytest.fixture
def rng():
    return make_rng(1234)
