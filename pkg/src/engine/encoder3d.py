"""
3D ViT image encoders (12-layer teacher, 6-layer student) built on `attention`.

Volumes are cut into non-overlapping p^3 patches in raster order, projected to
d-dimensional tokens, offset by learned positional embeddings and run through
pre-norm transformer blocks. The first `ffn_only_prefix` blocks have no
attention sublayer at all. Every block output is kept for distillation.
"""
from __future__ import annotations

from contextlib import AbstractContextManager, nullcontext
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .attention import (
    AttentionConfig,
    AttentionVariant,
    AttentionWeights,
    get_attention,
    is_sparse,
)
from .errors import RejectedInputError
from .tensor_core import (
    TAG_FFN,
    TAG_PATCH_EMBED,
    Rng,
    Tape,
    Tensor,
    add,
    gelu,
    layernorm,
    linear,
    reshape,
)

Params = dict[str, Tensor]
Scale = Literal["toy", "paper"]
INIT_STD = 0.02
EMBEDDING_PARAMS = ("patch_embed.weight", "patch_embed.bias", "pos_embed")


# --- Configuration ---
class ViTConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_extent: int = Field(gt=0)
    patch_size: int = Field(gt=0)
    embed_dim: int = Field(gt=0)
    num_layers: int = Field(gt=0)
    num_heads: int = Field(gt=0)
    ffn_hidden_ratio: int = Field(default=4, gt=0)
    ffn_only_prefix: int = Field(default=0, ge=0)
    attention_variant: AttentionVariant = "naive"
    segment_size: int = Field(default=16, ge=1)
    dilation_interval: int = Field(default=1, ge=1)
    tile_rows: int = Field(default=16, ge=1)
    tile_cols: int = Field(default=16, ge=1)
    layernorm_eps: float = Field(default=1e-6, gt=0)

    @model_validator(mode="after")
    def _consistent(self) -> ViTConfig:
        if self.input_extent % self.patch_size:
            raise ValueError(f"input_extent {self.input_extent} is not divisible by patch_size {self.patch_size}")
        if self.ffn_only_prefix > self.num_layers:
            raise ValueError(f"ffn_only_prefix {self.ffn_only_prefix} exceeds num_layers {self.num_layers}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        span = self.segment_size * self.dilation_interval
        if is_sparse(self.attention_variant) and self.num_tokens % span:
            raise ValueError(
                f"token count N={self.num_tokens} is not divisible by w*r with "
                f"w={self.segment_size}, r={self.dilation_interval}"
            )
        return self

    @property
    def grid(self) -> int:
        return self.input_extent // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**3

    @property
    def patch_volume(self) -> int:
        return self.patch_size**3

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_hidden_ratio * self.embed_dim

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            segment_size=self.segment_size,
            dilation_interval=self.dilation_interval,
            tile_rows=self.tile_rows,
            tile_cols=self.tile_cols,
        )

    def with_overrides(self, **overrides: object) -> ViTConfig:
        """Returns a re-validated copy; `None` overrides are ignored."""
        updates = {key: value for key, value in overrides.items() if value is not None}
        try:
            return ViTConfig(**{**self.model_dump(), **updates})
        except ValueError as e:
            raise RejectedInputError(str(e)) from e


_SCALES: dict[str, dict[str, dict[str, object]]] = {
    "toy": {
        "teacher": dict(input_extent=32, patch_size=8, embed_dim=64, num_layers=12, num_heads=8),
        "student": dict(
            input_extent=32, patch_size=8, embed_dim=64, num_layers=6, num_heads=4, ffn_only_prefix=2,
            attention_variant="sparse_flash", segment_size=16, dilation_interval=2,
        ),
    },
    "paper": {
        "teacher": dict(input_extent=128, patch_size=16, embed_dim=768, num_layers=12, num_heads=12),
        "student": dict(
            input_extent=128, patch_size=16, embed_dim=768, num_layers=6, num_heads=6, ffn_only_prefix=2,
            attention_variant="sparse_flash", segment_size=64, dilation_interval=2,
        ),
    },
}


def _scale_preset(scale: str, role: str) -> ViTConfig:
    if scale not in _SCALES:
        raise RejectedInputError(f"unknown scale {scale!r}; expected one of {', '.join(_SCALES)}")
    return ViTConfig(**_SCALES[scale][role])  # type: ignore[arg-type]


def make_teacher_config(scale: str = "toy") -> ViTConfig:
    return _scale_preset(scale, "teacher")


def make_student_config(scale: str = "toy") -> ViTConfig:
    return _scale_preset(scale, "student")


# --- Parameters ---
def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every encoder parameter, in a fixed order."""
    d, hidden = cfg.embed_dim, cfg.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_volume, d),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.num_tokens, d),
    }
    for i in range(cfg.num_layers):
        prefix = f"blocks.{i}."
        if i >= cfg.ffn_only_prefix:
            shapes[prefix + "norm1.gamma"] = (d,)
            shapes[prefix + "norm1.beta"] = (d,)
            for name in ("wq", "wk", "wv", "wo"):
                shapes[f"{prefix}attn.{name}"] = (d, d)
            for name in ("bq", "bk", "bv", "bo"):
                shapes[f"{prefix}attn.{name}"] = (d,)
        shapes[prefix + "norm2.gamma"] = (d,)
        shapes[prefix + "norm2.beta"] = (d,)
        shapes[prefix + "ffn.w1"] = (d, hidden)
        shapes[prefix + "ffn.b1"] = (hidden,)
        shapes[prefix + "ffn.w2"] = (hidden, d)
        shapes[prefix + "ffn.b2"] = (d,)
    return shapes


def init_encoder_params(cfg: ViTConfig, rng: Rng, *, requires_grad: bool = False) -> Params:
    """Truncated-normal (std 0.02) matrices and positional embeddings, zero biases, unit gammas."""
    return {
        name: _init_param(name, shape, rng, requires_grad)
        for name, shape in param_shapes(cfg).items()
    }


def _init_param(name: str, shape: tuple[int, ...], rng: Rng, requires_grad: bool) -> Tensor:
    if name.endswith(".gamma"):
        values = np.ones(shape, dtype=np.float32)
    elif len(shape) == 1:
        values = np.zeros(shape, dtype=np.float32)
    else:
        values = rng.truncated_normal(shape, INIT_STD)
    return Tensor(values, requires_grad=requires_grad, name=name)


def check_params(cfg: ViTConfig, params: Params) -> None:
    expected = param_shapes(cfg)
    missing = [name for name in expected if name not in params]
    if missing:
        raise RejectedInputError(f"missing encoder parameters: {', '.join(missing[:4])}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise RejectedInputError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


def attention_weights(params: Params, block: int) -> AttentionWeights:
    prefix = f"blocks.{block}.attn."
    return AttentionWeights(**{name: params[prefix + name] for name in
                               ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")})


# --- Forward ---
@dataclass(frozen=True)
class LayerOutputs:
    """Per-block outputs of one encoder pass (each N x d or B x N x d)."""

    layers: tuple[Tensor, ...]

    def __post_init__(self) -> None:
        if len({layer.shape for layer in self.layers}) > 1:
            raise RejectedInputError("layer outputs must share one shape")

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, index: int) -> Tensor:
        return self.layers[index]

    @property
    def final(self) -> Tensor:
        return self.layers[-1]


def _patchify(volume: np.ndarray, p: int) -> np.ndarray:
    """(B, D, H, W) -> (B, N, p^3) with patches in raster (d, h, w) order."""
    b, depth, height, width = volume.shape
    blocks = volume.reshape(b, depth // p, p, height // p, p, width // p, p)
    return blocks.transpose(0, 1, 3, 5, 2, 4, 6).reshape(b, -1, p**3)


def patch_embed_3d(
    volume: Tensor,
    cfg: ViTConfig,
    params: Params | None = None,
    rng: Rng | None = None,
) -> Tensor:
    """
    Projects every p^3 patch to a token and adds its positional embedding.

    Args:
        volume: D x H x W or B x D x H x W.
        cfg: encoder configuration (patch size, width, token count).
        params: uses `patch_embed.weight`, `patch_embed.bias` and `pos_embed`.
        rng: when `params` is omitted, fresh embedding parameters are drawn from it.

    Returns:
        N x d tokens (B x N x d for batched input).
    """
    if volume.ndim not in (3, 4):
        raise RejectedInputError(f"volume must be D x H x W or B x D x H x W, got {volume.shape}")
    extents = volume.shape[-3:]
    if any(extent % cfg.patch_size for extent in extents):
        raise RejectedInputError(f"volume extents {extents} are not divisible by patch size {cfg.patch_size}")
    if params is None:
        if rng is None:
            raise RejectedInputError("patch_embed_3d needs params or an rng to draw them from")
        shapes = param_shapes(cfg)
        params = {name: _init_param(name, shapes[name], rng, False) for name in EMBEDDING_PARAMS}

    batched = volume.data if volume.ndim == 4 else volume.data[None]
    patches = _patchify(batched, cfg.patch_size)
    if patches.shape[1] != cfg.num_tokens:
        raise RejectedInputError(f"volume yields {patches.shape[1]} tokens, config expects {cfg.num_tokens}")

    tokens = linear(Tensor(patches), params["patch_embed.weight"], params["patch_embed.bias"], tag=TAG_PATCH_EMBED)
    tokens = add(tokens, params["pos_embed"])
    return tokens if volume.ndim == 4 else reshape(tokens, tokens.shape[1:])


def _block(x: Tensor, index: int, cfg: ViTConfig, params: Params) -> Tensor:
    prefix = f"blocks.{index}."
    if index >= cfg.ffn_only_prefix:
        attend = get_attention(cfg.attention_variant)
        normed = layernorm(x, params[prefix + "norm1.gamma"], params[prefix + "norm1.beta"], cfg.layernorm_eps)
        x = add(x, attend(normed, attention_weights(params, index), cfg.attention_config()))
    normed = layernorm(x, params[prefix + "norm2.gamma"], params[prefix + "norm2.beta"], cfg.layernorm_eps)
    hidden = gelu(linear(normed, params[prefix + "ffn.w1"], params[prefix + "ffn.b1"], tag=TAG_FFN))
    return add(x, linear(hidden, params[prefix + "ffn.w2"], params[prefix + "ffn.b2"], tag=TAG_FFN))


def encode(volume: Tensor, cfg: ViTConfig, params: Params, tape: Tape | None = None) -> LayerOutputs:
    """
    Runs patch embedding and every transformer block, recording on `tape` if given.

    Blocks with index < ffn_only_prefix skip the attention sublayer entirely.
    """
    check_params(cfg, params)
    recording: AbstractContextManager[object] = tape if tape is not None else nullcontext()
    with recording:
        x = patch_embed_3d(volume, cfg, params)
        layers: list[Tensor] = []
        for index in range(cfg.num_layers):
            x = _block(x, index, cfg, params)
            layers.append(x)
    return LayerOutputs(tuple(layers))
