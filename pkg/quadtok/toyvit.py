"""
Desk-scale pre-LN Transformer encoder that classifies mixed-resolution token
sequences from a prepended CLS token. Forward only; no training.
"""

import math
from dataclasses import dataclass, fields

import numpy as np
from einops import rearrange
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, ValidationError, model_validator
from scipy.special import erf, softmax

from config import TOY_MODEL
from logging_config import get_logger
from quadtok.errors import ContractError, DimensionError, FormatError
from quadtok.initializers import seeded_generator, xavier_uniform
from quadtok.tensorio import load_bundle, save_bundle

logger = get_logger(__name__)


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    d_model: PositiveInt = TOY_MODEL["d_model"]
    n_heads: PositiveInt = TOY_MODEL["n_heads"]
    n_layers: PositiveInt = TOY_MODEL["n_layers"]
    mlp_ratio: PositiveInt = TOY_MODEL["mlp_ratio"]
    n_classes: PositiveInt = TOY_MODEL["n_classes"]
    layernorm_eps: PositiveFloat = TOY_MODEL["layernorm_eps"]

    @model_validator(mode="after")
    def _check_heads(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads ({self.n_heads}) must divide d_model ({self.d_model})")
        return self

    @property
    def mlp_dim(self) -> int:
        return self.d_model * self.mlp_ratio


@dataclass(frozen=True, eq=False)
class BlockWeights:
    """One encoder block. Matrices are (in, out) and applied as x @ W + b."""

    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray
    w_fc1: np.ndarray
    b_fc1: np.ndarray
    w_fc2: np.ndarray
    b_fc2: np.ndarray

    def shapes(self, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, m = cfg.d_model, cfg.mlp_dim
        return {
            "ln1_scale": (d,), "ln1_shift": (d,),
            "w_q": (d, d), "b_q": (d,), "w_k": (d, d), "b_k": (d,),
            "w_v": (d, d), "b_v": (d,), "w_o": (d, d), "b_o": (d,),
            "ln2_scale": (d,), "ln2_shift": (d,),
            "w_fc1": (d, m), "b_fc1": (m,), "w_fc2": (m, d), "b_fc2": (d,),
        }

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class ModelWeights:
    blocks: tuple[BlockWeights, ...]
    cls_token: np.ndarray
    final_ln_scale: np.ndarray
    final_ln_shift: np.ndarray
    head_weight: np.ndarray
    head_bias: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat role -> tensor mapping used for bundles and comparisons."""
        out = {}
        for i, block in enumerate(self.blocks):
            out.update({f"block{i}.{name}": t for name, t in block.tensors().items()})
        out.update({
            "cls_token": self.cls_token,
            "final_ln_scale": self.final_ln_scale,
            "final_ln_shift": self.final_ln_shift,
            "head_weight": self.head_weight,
            "head_bias": self.head_bias,
        })
        return out

    def check(self, cfg: ModelConfig) -> None:
        if len(self.blocks) != cfg.n_layers:
            raise DimensionError(f"weights have {len(self.blocks)} blocks, config says {cfg.n_layers}")
        expected = {}
        for i, block in enumerate(self.blocks):
            expected.update({f"block{i}.{name}": s for name, s in block.shapes(cfg).items()})
        expected.update({
            "cls_token": (cfg.d_model,),
            "final_ln_scale": (cfg.d_model,),
            "final_ln_shift": (cfg.d_model,),
            "head_weight": (cfg.d_model, cfg.n_classes),
            "head_bias": (cfg.n_classes,),
        })
        for role, tensor in self.tensors().items():
            if tensor.shape != expected[role]:
                raise DimensionError(f"{role} has shape {tensor.shape}, config needs {expected[role]}")
            if not np.all(np.isfinite(tensor)):
                raise ContractError(f"{role} contains non-finite values")

    def save(self, directory, cfg: ModelConfig):
        self.check(cfg)
        return save_bundle(directory, self.tensors(), {"kind": "toy_vit", "config": cfg.model_dump()})

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], cfg: ModelConfig) -> "ModelWeights":
        as64 = {role: np.asarray(t, dtype=np.float64) for role, t in tensors.items()}
        try:
            blocks = tuple(
                BlockWeights(**{f.name: as64[f"block{i}.{f.name}"] for f in fields(BlockWeights)})
                for i in range(cfg.n_layers)
            )
            weights = cls(
                blocks,
                as64["cls_token"],
                as64["final_ln_scale"],
                as64["final_ln_shift"],
                as64["head_weight"],
                as64["head_bias"],
            )
        except KeyError as e:
            raise FormatError(f"missing weight tensor {e}", field="tensors") from e
        weights.check(cfg)
        return weights

    @classmethod
    def load(cls, directory) -> tuple["ModelWeights", ModelConfig]:
        tensors, metadata = load_bundle(directory)
        if metadata.get("kind") != "toy_vit":
            raise FormatError(f"{directory} is not a toy ViT bundle", field="kind")
        try:
            cfg = ModelConfig.model_validate(metadata.get("config", {}))
        except ValidationError as e:
            raise FormatError(f"invalid model config: {e}", field="config") from e
        return cls.from_tensors(tensors, cfg), cfg


def init_weights(cfg: ModelConfig, seed: int) -> ModelWeights:
    """
    Xavier-uniform matrices drawn in a fixed order from PCG64(seed); biases
    and layernorm shifts zero, layernorm scales one.
    """
    rng = seeded_generator(seed)
    d, m = cfg.d_model, cfg.mlp_dim
    zeros, ones = np.zeros(d), np.ones(d)

    def dense(n_in, n_out):
        return xavier_uniform(rng, (n_in, n_out), n_in, n_out).astype(np.float64)

    blocks = []
    for _ in range(cfg.n_layers):
        blocks.append(BlockWeights(
            ln1_scale=ones, ln1_shift=zeros,
            w_q=dense(d, d), b_q=zeros, w_k=dense(d, d), b_k=zeros,
            w_v=dense(d, d), b_v=zeros, w_o=dense(d, d), b_o=zeros,
            ln2_scale=ones, ln2_shift=zeros,
            w_fc1=dense(d, m), b_fc1=np.zeros(m), w_fc2=dense(m, d), b_fc2=zeros,
        ))
    cls_token = xavier_uniform(rng, (d,), 1, d).astype(np.float64)
    head_weight = dense(d, cfg.n_classes)
    return ModelWeights(tuple(blocks), cls_token, ones, zeros, head_weight, np.zeros(cfg.n_classes))


# ========================
# Forward pass
# ========================
def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * scale + shift


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def self_attention(x: np.ndarray, block: BlockWeights, n_heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head self-attention over (N, d); returns output and (heads, N, N) probabilities."""
    q = rearrange(x @ block.w_q + block.b_q, "n (h k) -> h n k", h=n_heads)
    k = rearrange(x @ block.w_k + block.b_k, "n (h k) -> h n k", h=n_heads)
    v = rearrange(x @ block.w_v + block.b_v, "n (h k) -> h n k", h=n_heads)
    logits = q @ k.transpose(0, 2, 1) / math.sqrt(q.shape[-1])
    probs = softmax(logits, axis=-1)
    out = rearrange(probs @ v, "h n k -> n (h k)")
    return out @ block.w_o + block.b_o, probs


def forward(
    tokens: np.ndarray,
    weights: ModelWeights,
    cfg: ModelConfig,
    attention: list[np.ndarray] | None = None,
) -> np.ndarray:
    """
    Classify an (L, d_model) token matrix for any L ≥ 1.

    When ``attention`` is a list, each block's attention probabilities are
    appended to it.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.d_model:
        raise DimensionError(f"tokens must be L×{cfg.d_model}, got shape {tokens.shape}")
    if tokens.shape[0] < 1:
        raise DimensionError("token sequence is empty")
    if not np.all(np.isfinite(tokens)):
        raise ContractError("tokens contain non-finite values")
    weights.check(cfg)

    x = np.concatenate([weights.cls_token[None, :], tokens], axis=0)
    for block in weights.blocks:
        attended, probs = self_attention(
            layer_norm(x, block.ln1_scale, block.ln1_shift, cfg.layernorm_eps), block, cfg.n_heads
        )
        if attention is not None:
            attention.append(probs)
        x = x + attended
        hidden = gelu(layer_norm(x, block.ln2_scale, block.ln2_shift, cfg.layernorm_eps) @ block.w_fc1 + block.b_fc1)
        x = x + hidden @ block.w_fc2 + block.b_fc2
    cls_state = layer_norm(x[0], weights.final_ln_scale, weights.final_ln_shift, cfg.layernorm_eps)
    return cls_state @ weights.head_weight + weights.head_bias
