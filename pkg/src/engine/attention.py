"""
Multi-head self-attention operators sharing one input/output contract.

- `naive_mhsa`: dense reference; materializes every N x N score matrix.
- `flash_mhsa`: tiled online-softmax attention; never holds more than one
  score tile per head.
- `sparse_mhsa` / `sparse_flash_mhsa`: attention restricted to dilated
  segments of the flattened token sequence (w tokens sampled every r
  positions), computed per segment and scattered back to token order.

All operators take x of shape N x d (or B x N x d) and return the same shape.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Literal, get_args

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import RejectedInputError
from .settings import get_settings
from .tensor_core import (
    TAG_ATTENTION_CORE,
    TAG_PROJECTION,
    Array,
    OpCounter,
    Rng,
    Tensor,
    emit_op,
    active_counters,
    linear,
    matmul,
    put_rows,
    record_flops,
    reshape,
    scale,
    softmax_lastdim,
    take_rows,
    transient,
    transpose,
)

AttentionVariant = Literal["naive", "flash", "sparse", "sparse_flash"]
ATTENTION_VARIANTS: tuple[str, ...] = get_args(AttentionVariant)
FAULT_FLASH_SIGN_FLIP = "flash_sign_flip"

_active_faults: set[str] = set()


# --- Configuration and Parameters ---
class AttentionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    embed_dim: int = Field(gt=0)
    num_heads: int = Field(gt=0)
    segment_size: int = Field(default=16, ge=1)
    dilation_interval: int = Field(default=1, ge=1)
    tile_rows: int = Field(default=16, ge=1)
    tile_cols: int = Field(default=16, ge=1)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> AttentionConfig:
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass(frozen=True)
class AttentionWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor | None = None
    bk: Tensor | None = None
    bv: Tensor | None = None
    bo: Tensor | None = None

    def __post_init__(self) -> None:
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise RejectedInputError(f"{name} must be square {d}x{d}, got {getattr(self, name).shape}")
        for name in ("bq", "bk", "bv", "bo"):
            bias = getattr(self, name)
            if bias is not None and bias.shape != (d,):
                raise RejectedInputError(f"{name} must have shape ({d},), got {bias.shape}")

    @property
    def embed_dim(self) -> int:
        return self.wq.shape[0]

    def named(self) -> dict[str, Tensor]:
        fields = ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")
        return {name: getattr(self, name) for name in fields if getattr(self, name) is not None}


def init_attention_weights(
    embed_dim: int,
    rng: Rng,
    *,
    std: float = 0.02,
    bias: bool = True,
    requires_grad: bool = False,
) -> AttentionWeights:
    """Truncated-normal projections and zero biases."""
    def matrix() -> Tensor:
        return Tensor(rng.truncated_normal((embed_dim, embed_dim), std), requires_grad=requires_grad)

    def vector() -> Tensor | None:
        return Tensor(np.zeros(embed_dim, dtype=np.float32), requires_grad=requires_grad) if bias else None

    return AttentionWeights(matrix(), matrix(), matrix(), matrix(), vector(), vector(), vector(), vector())


# --- Segment Plans ---
@dataclass(frozen=True)
class SegmentPlan:
    """Dilated segments covering a token sequence exactly once.

    The sequence is cut into blocks of w*r tokens; inside each block, offset
    i in 0..r-1 gathers the w tokens i, i+r, ..., i+(w-1)r.
    """

    token_count: int
    segment_size: int
    dilation_interval: int
    segments: tuple[tuple[int, ...], ...]
    offset_convention: str = "block-local"

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    def index_array(self) -> NDArray[np.int64]:
        return np.asarray(self.segments, dtype=np.int64).reshape(self.num_segments, self.segment_size)

    def check(self) -> None:
        """Raises RejectedInputError unless the plan is a stride-r exact partition."""
        index = self.index_array()
        counts = np.bincount(index.reshape(-1), minlength=self.token_count)
        if counts.size != self.token_count or not np.all(counts == 1):
            raise RejectedInputError("segments do not partition the token range")
        if self.segment_size > 1 and not np.all(np.diff(index, axis=1) == self.dilation_interval):
            raise RejectedInputError("segment members are not spaced by the dilation interval")


def build_segment_plan(token_count: int, segment_size: int, dilation_interval: int) -> SegmentPlan:
    n, w, r = token_count, segment_size, dilation_interval
    if n < 1 or w < 1 or r < 1:
        raise RejectedInputError(f"N, w and r must be positive, got N={n}, w={w}, r={r}")
    if n % (w * r):
        raise RejectedInputError(f"token count N={n} is not divisible by w*r with w={w}, r={r}")
    blocks = n // (w * r)
    index = (
        (np.arange(blocks) * w * r)[:, None, None]
        + np.arange(r)[None, :, None]
        + (np.arange(w) * r)[None, None, :]
    ).reshape(-1, w)
    return SegmentPlan(n, w, r, tuple(tuple(int(i) for i in row) for row in index))


def gather_segments(x: Tensor, plan: SegmentPlan) -> Tensor:
    """x (..., N, d) -> (..., S, w, d) following the plan's segments."""
    if x.ndim < 2 or x.shape[-2] != plan.token_count:
        raise RejectedInputError(f"plan covers {plan.token_count} tokens, tensor has shape {x.shape}")
    return take_rows(x, plan.index_array())


def scatter_segments(segments: Tensor, plan: SegmentPlan, order: Sequence[int] | None = None) -> Tensor:
    """(..., S, w, d) -> (..., N, d); each token row is written exactly once."""
    if segments.ndim < 3 or segments.shape[-3] * segments.shape[-2] != plan.token_count:
        raise RejectedInputError(f"segments {segments.shape} do not cover {plan.token_count} tokens")
    return put_rows(segments, plan.index_array(), plan.token_count, order)


# --- Fault Injection ---
@contextmanager
def inject_fault(name: str) -> Iterator[None]:
    """Test hook that deliberately corrupts a kernel while active."""
    _active_faults.add(name)
    try:
        yield
    finally:
        _active_faults.discard(name)


# --- Head Helpers ---
def _swap_adjacent(rank: int, first: int) -> list[int]:
    axes = list(range(rank))
    axes[first], axes[first + 1] = axes[first + 1], axes[first]
    return axes


def _split_heads(t: Tensor, num_heads: int) -> Tensor:
    """(..., n, d) -> (..., h, n, d/h)"""
    *lead, n, d = t.shape
    split = reshape(t, (*lead, n, num_heads, d // num_heads))
    return transpose(split, _swap_adjacent(split.ndim, split.ndim - 3))


def _merge_heads(t: Tensor) -> Tensor:
    """(..., h, n, dh) -> (..., n, h*dh)"""
    *lead, h, n, dh = t.shape
    swapped = transpose(t, _swap_adjacent(t.ndim, t.ndim - 3))
    return reshape(swapped, (*lead, n, h * dh))


def _check_input(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig) -> None:
    if x.ndim not in (2, 3):
        raise RejectedInputError(f"attention input must be N x d or B x N x d, got {x.shape}")
    if x.shape[-1] != cfg.embed_dim or wts.embed_dim != cfg.embed_dim:
        raise RejectedInputError(
            f"embed_dim mismatch: input {x.shape[-1]}, weights {wts.embed_dim}, config {cfg.embed_dim}"
        )


# --- Attention Cores (inputs are (..., n, dh) per head) ---
def naive_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(dh)) v with the full score matrix in memory."""
    *lead, n, dh = q.shape
    score_bytes = math.prod(lead) * n * n * q.dtype.itemsize
    with transient(2 * score_bytes):
        key_t = transpose(k, _swap_adjacent(k.ndim, k.ndim - 2))
        scores = scale(matmul(q, key_t, tag=TAG_ATTENTION_CORE), 1.0 / math.sqrt(dh))
        probs = softmax_lastdim(scores)
        return matmul(probs, v, tag=TAG_ATTENTION_CORE)


def _flash_forward(
    q: Array,
    k: Array,
    v: Array,
    tile_rows: int,
    tile_cols: int,
    counters: tuple[OpCounter, ...],
    flip_sign: bool,
) -> tuple[Array, Array]:
    g, n, dh = q.shape
    factor = 1.0 / math.sqrt(dh)
    itemsize = q.dtype.itemsize
    out = np.empty_like(q)
    logsumexp = np.empty((g, n), dtype=q.dtype)

    for r0 in range(0, n, tile_rows):
        r1 = min(r0 + tile_rows, n)
        br = r1 - r0
        q_tile = q[:, r0:r1]
        with transient(g * br * (dh + 2) * itemsize, counters):
            acc = np.zeros((g, br, dh), dtype=q.dtype)
            row_max = np.full((g, br), -np.inf, dtype=q.dtype)
            row_sum = np.zeros((g, br), dtype=q.dtype)
            for c0 in range(0, n, tile_cols):
                c1 = min(c0 + tile_cols, n)
                bc = c1 - c0
                with transient(2 * g * br * bc * itemsize, counters):
                    scores = np.matmul(q_tile, np.swapaxes(k[:, c0:c1], 1, 2)) * factor
                    new_max = np.maximum(row_max, scores.max(axis=-1))
                    probs = np.exp(scores - new_max[..., None])
                    correction = np.exp(row_max - new_max)
                    row_sum = correction * row_sum + probs.sum(axis=-1)
                    contribution = np.matmul(probs, v[:, c0:c1])
                    if flip_sign and c0 == 0:
                        contribution = -contribution
                    acc = correction[..., None] * acc + contribution
                    row_max = new_max
                    record_flops(4 * g * br * bc * dh, TAG_ATTENTION_CORE, counters)
            out[:, r0:r1] = acc / row_sum[..., None]
            logsumexp[:, r0:r1] = row_max + np.log(row_sum)
    return out, logsumexp


def _flash_backward(
    q: Array,
    k: Array,
    v: Array,
    out: Array,
    logsumexp: Array,
    grad_out: Array,
    tile_rows: int,
    tile_cols: int,
) -> tuple[Array, Array, Array]:
    g, n, dh = q.shape
    factor = 1.0 / math.sqrt(dh)
    delta = (grad_out * out).sum(axis=-1)
    grad_q = np.zeros_like(q)
    grad_k = np.zeros_like(k)
    grad_v = np.zeros_like(v)

    for c0 in range(0, n, tile_cols):
        c1 = min(c0 + tile_cols, n)
        k_tile, v_tile = k[:, c0:c1], v[:, c0:c1]
        for r0 in range(0, n, tile_rows):
            r1 = min(r0 + tile_rows, n)
            q_tile, go_tile = q[:, r0:r1], grad_out[:, r0:r1]
            scores = np.matmul(q_tile, np.swapaxes(k_tile, 1, 2)) * factor
            probs = np.exp(scores - logsumexp[:, r0:r1, None])
            grad_v[:, c0:c1] += np.matmul(np.swapaxes(probs, 1, 2), go_tile)
            grad_probs = np.matmul(go_tile, np.swapaxes(v_tile, 1, 2))
            grad_scores = probs * (grad_probs - delta[:, r0:r1, None])
            grad_q[:, r0:r1] += np.matmul(grad_scores, k_tile) * factor
            grad_k[:, c0:c1] += np.matmul(np.swapaxes(grad_scores, 1, 2), q_tile) * factor
    return grad_q, grad_k, grad_v


def flash_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    *,
    tile_rows: int,
    tile_cols: int,
    workers: int | None = None,
) -> Tensor:
    """
    Tiled online-softmax attention over (..., n, dh) heads.

    Leading axes (batch, segments, heads) are independent slices; with more
    than one worker they are split across a thread pool. Each slice is
    computed by the same sequential tile loop, so the result does not depend
    on the worker count.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim < 2:
        raise RejectedInputError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    *lead, n, dh = q.shape
    g = math.prod(lead)
    qf, kf, vf = (t.data.reshape(g, n, dh) for t in (q, k, v))
    counters = active_counters()
    flip_sign = FAULT_FLASH_SIGN_FLIP in _active_faults
    workers = get_settings().workers if workers is None else workers

    if workers > 1 and g > 1:
        chunks = [c for c in np.array_split(np.arange(g), min(workers, g)) if c.size]
        out = np.empty_like(qf)
        logsumexp = np.empty((g, n), dtype=qf.dtype)
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = pool.map(
                lambda c: _flash_forward(
                    qf[c[0] : c[-1] + 1], kf[c[0] : c[-1] + 1], vf[c[0] : c[-1] + 1],
                    tile_rows, tile_cols, counters, flip_sign,
                ),
                chunks,
            )
            for chunk, (chunk_out, chunk_lse) in zip(chunks, results):
                out[chunk[0] : chunk[-1] + 1] = chunk_out
                logsumexp[chunk[0] : chunk[-1] + 1] = chunk_lse
    else:
        out, logsumexp = _flash_forward(qf, kf, vf, tile_rows, tile_cols, counters, flip_sign)

    def rule(grad: Array) -> tuple[Array, Array, Array]:
        grad_q, grad_k, grad_v = _flash_backward(
            qf, kf, vf, out, logsumexp, grad.reshape(g, n, dh), tile_rows, tile_cols
        )
        return grad_q.reshape(q.shape), grad_k.reshape(k.shape), grad_v.reshape(v.shape)

    return emit_op("flash_attention", out.reshape(q.shape), (q, k, v), rule)


# --- Multi-head Operators ---
def _project(x: Tensor, wts: AttentionWeights) -> tuple[Tensor, Tensor, Tensor]:
    return (
        linear(x, wts.wq, wts.bq, tag=TAG_PROJECTION),
        linear(x, wts.wk, wts.bk, tag=TAG_PROJECTION),
        linear(x, wts.wv, wts.bv, tag=TAG_PROJECTION),
    )


CoreFn = Callable[[Tensor, Tensor, Tensor], Tensor]


def _dense_mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig, core: CoreFn) -> Tensor:
    _check_input(x, wts, cfg)
    q, k, v = (_split_heads(t, cfg.num_heads) for t in _project(x, wts))
    attended = _merge_heads(core(q, k, v))
    return linear(attended, wts.wo, wts.bo, tag=TAG_PROJECTION)


def _segmented_mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig, core: CoreFn) -> Tensor:
    _check_input(x, wts, cfg)
    plan = build_segment_plan(x.shape[-2], cfg.segment_size, cfg.dilation_interval)
    q, k, v = (_split_heads(gather_segments(t, plan), cfg.num_heads) for t in _project(x, wts))
    attended = scatter_segments(_merge_heads(core(q, k, v)), plan)
    return linear(attended, wts.wo, wts.bo, tag=TAG_PROJECTION)


def _flash_core(cfg: AttentionConfig) -> CoreFn:
    def core(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        return flash_attention(q, k, v, tile_rows=cfg.tile_rows, tile_cols=cfg.tile_cols)

    return core


def naive_mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    """Dense multi-head self-attention with scale 1/sqrt(d/h)."""
    return _dense_mhsa(x, wts, cfg, naive_attention)


def flash_mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    return _dense_mhsa(x, wts, cfg, _flash_core(cfg))


def sparse_mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    """Segment-restricted attention with a dense score matrix per segment."""
    return _segmented_mhsa(x, wts, cfg, naive_attention)


def sparse_flash_mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    """
    Gather dilated segments, run flash attention inside each, scatter back.

    Projections see the full sequence; only the attention interaction is
    restricted to segments. Core cost is 4*N*w*d instead of 4*N*N*d.
    """
    return _segmented_mhsa(x, wts, cfg, _flash_core(cfg))


AttentionFn = Callable[[Tensor, AttentionWeights, AttentionConfig], Tensor]

_REGISTRY: dict[str, AttentionFn] = {
    "naive": naive_mhsa,
    "flash": flash_mhsa,
    "sparse": sparse_mhsa,
    "sparse_flash": sparse_flash_mhsa,
}


def get_attention(variant: str) -> AttentionFn:
    try:
        return _REGISTRY[variant]
    except KeyError:
        raise RejectedInputError(
            f"unknown attention variant {variant!r}; expected one of {', '.join(ATTENTION_VARIANTS)}"
        ) from None


def is_sparse(variant: str) -> bool:
    return variant in ("sparse", "sparse_flash")
