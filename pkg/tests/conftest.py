import numpy as np
import pytest

from quadtok.extractor import ConvLayerSpec, FeatureExtractorSpec
from quadtok.imagecore import Image
from quadtok.initializers import seeded_generator, xavier_uniform
from quadtok.quadtree import QuadtreeConfig
from quadtok.scorers import ScorerConfig


def random_image(height: int = 256, width: int = 256, seed: int = 0) -> Image:
    """Byte-valued random image, so it survives a PPM round trip unchanged."""
    rng = np.random.default_rng(seed)
    return Image.from_bytes(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def half_textured_image(height: int = 256, width: int = 256, seed: int = 0) -> Image:
    """Random noise on the left half, flat grey on the right half."""
    data = np.full((height, width, 3), 128, dtype=np.uint8)
    rng = np.random.default_rng(seed)
    data[:, : width // 2] = rng.integers(0, 256, size=(height, width // 2, 3), dtype=np.uint8)
    return Image.from_bytes(data)


def constant_image(height: int = 256, width: int = 256, value: int = 100) -> Image:
    return Image.from_bytes(np.full((height, width, 3), value, dtype=np.uint8))


def tiny_extractor(seed: int = 1, activation: str = "relu") -> FeatureExtractorSpec:
    """Two 4×4 stride-2 convolutions, 3→4→5 channels, ×4 downscaling."""
    rng = seeded_generator(seed)
    layers, weights, biases = [], [], []
    for c_in, c_out in ((3, 4), (4, 5)):
        layers.append(ConvLayerSpec(kernel=4, stride=2, in_channels=c_in, out_channels=c_out, activation=activation))
        weights.append(xavier_uniform(rng, (c_out, c_in, 4, 4), c_in * 16, c_out * 16))
        biases.append(rng.random(c_out).astype(np.float32) * 0.1)
    return FeatureExtractorSpec(tuple(layers), tuple(weights), tuple(biases))


@pytest.fixture
def image() -> Image:
    return random_image()


@pytest.fixture
def quadtree_cfg() -> QuadtreeConfig:
    return QuadtreeConfig()


@pytest.fixture
def scorer_cfg() -> ScorerConfig:
    return ScorerConfig()
