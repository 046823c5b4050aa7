"""
Pluggable convolutional feature extractor and the feature maps it produces.

The extractor is a plain stack of k×k strided convolutions with pointwise
nonlinearities. Padding is "same"-style and asymmetric (pad_total = k − stride,
``pad_total // 2`` before), so every layer divides the spatial size by exactly
its stride and the stack's downscale ratio is the product of strides.
"""

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, PositiveInt, ValidationError, model_validator
from scipy.special import erf

from config import EXTRACTOR_ACTIVATION, EXTRACTOR_CHANNELS, EXTRACTOR_KERNEL, EXTRACTOR_STRIDE
from logging_config import get_logger
from quadtok.errors import DimensionError, FormatError
from quadtok.imagecore import Image
from quadtok.initializers import seeded_generator, xavier_uniform
from quadtok.tensorio import load_bundle, load_tensor, save_bundle

logger = get_logger(__name__)

Activation = Literal["relu", "gelu", "none"]


class ConvLayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kernel: PositiveInt
    stride: PositiveInt
    in_channels: PositiveInt
    out_channels: PositiveInt
    activation: Activation = "relu"

    @model_validator(mode="after")
    def _check_kernel(self):
        if self.kernel < self.stride:
            raise ValueError(f"kernel {self.kernel} smaller than stride {self.stride}")
        return self


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """H'×W'×d feature tensor; ``downscale_ratio`` pixels per cell on both axes."""

    data: np.ndarray
    downscale_ratio: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise DimensionError(f"feature map must be H'×W'×d, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DimensionError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]

    @classmethod
    def load(cls, path, image_height: int, image_width: int) -> "FeatureMap":
        """Ingest a precomputed (H', W', d) container for an image of known size."""
        return cls.from_array(load_tensor(path), image_height, image_width)

    @classmethod
    def from_array(cls, data: np.ndarray, image_height: int, image_width: int) -> "FeatureMap":
        if data.ndim != 3:
            raise FormatError(f"feature map tensor must have rank 3, got {data.ndim}", field="rank")
        ratio_h, rem_h = divmod(image_height, data.shape[0])
        ratio_w, rem_w = divmod(image_width, data.shape[1])
        if rem_h or rem_w or ratio_h != ratio_w:
            raise DimensionError(
                f"feature grid {data.shape[:2]} is not an equal integer downscale of {image_height}×{image_width}"
            )
        return cls(data, ratio_h)


@dataclass(frozen=True, eq=False)
class FeatureExtractorSpec:
    """Layer descriptors plus their weights (out, in, k, k) and biases (out,)."""

    layers: tuple[ConvLayerSpec, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("extractor needs at least one layer")
        if not (len(self.layers) == len(self.weights) == len(self.biases)):
            raise DimensionError("one weight and one bias tensor per layer required")
        weights, biases = [], []
        channels = 3
        for i, (layer, weight, bias) in enumerate(zip(self.layers, self.weights, self.biases)):
            if layer.in_channels != channels:
                raise DimensionError(f"layer {i} expects {layer.in_channels} channels, previous layer yields {channels}")
            expected = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            weight = np.asarray(weight, dtype=np.float64)
            bias = np.asarray(bias, dtype=np.float64)
            if weight.shape != expected:
                raise DimensionError(f"layer {i} weight has shape {weight.shape}, descriptor says {expected}")
            if bias.shape != (layer.out_channels,):
                raise DimensionError(f"layer {i} bias has shape {bias.shape}, expected ({layer.out_channels},)")
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise DimensionError(f"layer {i} has non-finite weights")
            weight.setflags(write=False)
            bias.setflags(write=False)
            weights.append(weight)
            biases.append(bias)
            channels = layer.out_channels
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "biases", tuple(biases))

    @property
    def downscale_ratio(self) -> int:
        return math.prod(layer.stride for layer in self.layers)

    @property
    def depth(self) -> int:
        return self.layers[-1].out_channels

    def save(self, directory):
        tensors = {}
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            tensors[f"layer{i}.weight"] = weight
            tensors[f"layer{i}.bias"] = bias
        metadata = {
            "kind": "feature_extractor",
            "downscale_ratio": self.downscale_ratio,
            "layers": [layer.model_dump() for layer in self.layers],
        }
        return save_bundle(directory, tensors, metadata)

    @classmethod
    def load(cls, directory) -> "FeatureExtractorSpec":
        tensors, metadata = load_bundle(directory)
        if metadata.get("kind") != "feature_extractor":
            raise FormatError(f"{directory} is not a feature extractor bundle", field="kind")
        try:
            layers = tuple(ConvLayerSpec.model_validate(layer) for layer in metadata["layers"])
        except (KeyError, ValidationError) as e:
            raise FormatError(f"invalid layer descriptors: {e}", field="layers") from e
        try:
            weights = tuple(tensors[f"layer{i}.weight"] for i in range(len(layers)))
            biases = tuple(tensors[f"layer{i}.bias"] for i in range(len(layers)))
        except KeyError as e:
            raise FormatError(f"missing tensor {e}", field="tensors") from e
        spec = cls(layers, weights, biases)
        declared = metadata.get("downscale_ratio", spec.downscale_ratio)
        if declared != spec.downscale_ratio:
            raise FormatError(
                f"declared downscale ratio {declared} != product of strides {spec.downscale_ratio}",
                field="downscale_ratio",
            )
        logger.info(
            "Loaded feature extractor",
            extra={"extra_fields": {"directory": str(directory), "layers": len(layers), "ratio": spec.downscale_ratio}},
        )
        return spec


def default_extractor_spec(seed: int = 0) -> FeatureExtractorSpec:
    """Five 3×3 stride-2 ReLU convolutions, 3→8→16→16→32→32 channels, ×32 downscaling."""
    rng = seeded_generator(seed)
    layers, weights, biases = [], [], []
    for c_in, c_out in zip(EXTRACTOR_CHANNELS[:-1], EXTRACTOR_CHANNELS[1:]):
        k = EXTRACTOR_KERNEL
        layers.append(ConvLayerSpec(kernel=k, stride=EXTRACTOR_STRIDE, in_channels=c_in, out_channels=c_out,
                                    activation=EXTRACTOR_ACTIVATION))
        weights.append(xavier_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k))
        biases.append(np.zeros(c_out, dtype=np.float32))
    return FeatureExtractorSpec(tuple(layers), tuple(weights), tuple(biases))


def identity_extractor() -> FeatureExtractorSpec:
    """1×1 convolution with identity weights: features equal pixels."""
    layer = ConvLayerSpec(kernel=1, stride=1, in_channels=3, out_channels=3, activation="none")
    return FeatureExtractorSpec((layer,), (np.eye(3).reshape(3, 3, 1, 1),), (np.zeros(3),))


# ========================
# Forward pass
# ========================
def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """(H, W, C_in) -> (H/stride, W/stride, C_out)."""
    k = weight.shape[-1]
    if x.shape[0] % stride or x.shape[1] % stride:
        raise DimensionError(f"stride {stride} does not divide input {x.shape[:2]}")
    pad_total = k - stride
    before = pad_total // 2
    after = pad_total - before
    padded = np.pad(x, ((before, after), (before, after), (0, 0)))
    windows = sliding_window_view(padded, (k, k), axis=(0, 1))[::stride, ::stride]
    return np.einsum("hwcij,ocij->hwo", windows, weight) + bias


def _activate(x: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "gelu":
        return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
    return x


def run_extractor(arr: np.ndarray, spec: FeatureExtractorSpec) -> np.ndarray:
    """Forward pass on a float64 (H, W, 3) array."""
    height, width = arr.shape[:2]
    ratio = spec.downscale_ratio
    if height % ratio or width % ratio:
        raise DimensionError(f"image {height}×{width} not divisible by extractor ratio {ratio}")
    x = np.asarray(arr, dtype=np.float64)
    for layer, weight, bias in zip(spec.layers, spec.weights, spec.biases):
        x = _activate(conv2d(x, weight, bias, layer.stride), layer.activation)
    return x


def extract_features(img: Image, spec: FeatureExtractorSpec) -> FeatureMap:
    return FeatureMap(run_extractor(img.data, spec), spec.downscale_ratio)
