"""
Dense tensor arithmetic with a recorded gradient tape and operation counters.

Tensors wrap read-only numpy buffers (float32 in production, float64 for
shadow evaluation inside gradient checks). Every differentiable operation is a
plain function that computes its result eagerly and, when a `Tape` is active
and an input requires grad, records a backward rule on that tape.
"""
from __future__ import annotations

import itertools
import math
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar, Token
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import erf

from .errors import RejectedInputError

# --- Constants ---
FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
TAG_MATMUL = "matmul"
TAG_PATCH_EMBED = "patch_embed"
TAG_PROJECTION = "projection"
TAG_ATTENTION_CORE = "attention_core"
TAG_FFN = "ffn"

Array = NDArray[np.floating]
BackwardRule = Callable[[Array], Sequence["Array | None"]]

_uids = itertools.count()


# --- Random Numbers ---
class Rng:
    """Seeded counter-based generator (Philox) with Box-Muller normals."""

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self._generator = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, shape: Sequence[int] | int, low: float = 0.0, high: float = 1.0) -> NDArray[np.float64]:
        return low + (high - low) * self._generator.random(shape)

    def normal(
        self,
        shape: Sequence[int] | int,
        std: float = 1.0,
        dtype: type[np.floating] = np.float32,
    ) -> Array:
        shape_tuple = (shape,) if isinstance(shape, int) else tuple(shape)
        count = math.prod(shape_tuple)
        pairs = (count + 1) // 2
        u1 = 1.0 - self._generator.random(pairs)  # (0, 1], keeps log finite
        u2 = self._generator.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        samples = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
        return (std * samples).reshape(shape_tuple).astype(dtype)

    def truncated_normal(
        self,
        shape: Sequence[int] | int,
        std: float,
        bound: float = 2.0,
        dtype: type[np.floating] = np.float32,
    ) -> Array:
        """Normal samples redrawn until they fall within `bound` standard deviations."""
        samples = self.normal(shape, 1.0, np.float64)
        outside = np.abs(samples) > bound
        while outside.any():
            samples[outside] = self.normal(int(outside.sum()), 1.0, np.float64)
            outside = np.abs(samples) > bound
        return (std * samples).astype(dtype)

    def integers(self, low: int, high: int, size: Sequence[int] | int | None = None) -> NDArray[np.int64]:
        return self._generator.integers(low, high, size=size)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self._generator.permutation(n)

    def child(self) -> Rng:
        """Derives an independent generator; the parent stream advances by one draw."""
        return Rng(int(self._generator.integers(0, 2**62)))


# --- Operation Counters ---
@dataclass
class OpCounter:
    """Multiply-add flops and peak live scratch bytes for one measured region."""

    flops: int = 0
    peak_transient_bytes: int = 0
    live_transient_bytes: int = 0
    flops_by_tag: dict[str, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add_flops(self, count: int, tag: str = TAG_MATMUL) -> None:
        with self._lock:
            self.flops += count
            self.flops_by_tag[tag] = self.flops_by_tag.get(tag, 0) + count

    def allocate(self, nbytes: int) -> None:
        with self._lock:
            self.live_transient_bytes += nbytes
            self.peak_transient_bytes = max(self.peak_transient_bytes, self.live_transient_bytes)

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.live_transient_bytes -= nbytes

    def tag_flops(self, tag: str) -> int:
        return self.flops_by_tag.get(tag, 0)


_ACTIVE_COUNTERS: ContextVar[tuple[OpCounter, ...]] = ContextVar("active_counters", default=())


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Opens a measured region; nested regions all see the inner operations."""
    counter = OpCounter()
    token = _ACTIVE_COUNTERS.set(_ACTIVE_COUNTERS.get() + (counter,))
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.reset(token)


def active_counters() -> tuple[OpCounter, ...]:
    return _ACTIVE_COUNTERS.get()


def record_flops(count: int, tag: str = TAG_MATMUL, counters: tuple[OpCounter, ...] | None = None) -> None:
    for counter in active_counters() if counters is None else counters:
        counter.add_flops(count, tag)


@contextmanager
def transient(nbytes: int, counters: tuple[OpCounter, ...] | None = None) -> Iterator[None]:
    """Marks `nbytes` of scratch as live for the duration of the block."""
    targets = active_counters() if counters is None else counters
    for counter in targets:
        counter.allocate(nbytes)
    try:
        yield
    finally:
        for counter in targets:
            counter.release(nbytes)


# --- Tensor ---
class Tensor:
    """Immutable dense array with shape metadata and a gradient flag."""

    __slots__ = ("data", "requires_grad", "uid", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str | None = None) -> None:
        array = np.asarray(data)
        dtype = array.dtype if array.dtype in FLOAT_DTYPES else np.dtype(np.float32)
        self._bind(np.array(array, dtype=dtype, order="C", copy=True), requires_grad, name)

    def _bind(self, array: Array, requires_grad: bool, name: str | None) -> None:
        if any(extent < 1 for extent in array.shape):
            raise RejectedInputError(f"tensor extents must be positive, got shape {array.shape}")
        array.flags.writeable = False
        self.data = array
        self.requires_grad = requires_grad
        self.uid = next(_uids)
        self.name = name

    @classmethod
    def _wrap(cls, array: Array, requires_grad: bool = False) -> Tensor:
        """Adopts a freshly computed buffer without copying it."""
        tensor = cls.__new__(cls)
        # ascontiguousarray would promote 0-d results to shape (1,)
        array = np.asarray(array)
        if not array.flags.c_contiguous:
            array = np.ascontiguousarray(array)
        if array.dtype not in FLOAT_DTYPES:
            array = array.astype(np.float32)
        tensor._bind(array, requires_grad, None)
        return tensor

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype: type[np.floating] = np.float32) -> Tensor:
        return cls._wrap(np.zeros(tuple(shape), dtype=dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def numel(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype[np.floating]:
        return self.data.dtype

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        if self.numel != 1:
            raise RejectedInputError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype: type[np.floating], requires_grad: bool | None = None) -> Tensor:
        flag = self.requires_grad if requires_grad is None else requires_grad
        return Tensor._wrap(self.data.astype(dtype), flag)

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


# --- Tape ---
@dataclass
class TapeEntry:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)


class Tape:
    """Ordered record of differentiable operations executed while active.

    Usage:
        with Tape() as tape:
            loss = ...
        grads = backward(tape, loss)
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self._outputs: set[int] = set()
        self._tokens: list[Token[Tape | None]] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)
        self._outputs.add(entry.output.uid)

    def produced(self, tensor: Tensor) -> bool:
        return tensor.uid in self._outputs

    def __len__(self) -> int:
        return len(self.entries)


def emit_op(name: str, result: Array, inputs: tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    tracked = tape is not None and any(tensor.requires_grad for tensor in inputs)
    output = Tensor._wrap(result, requires_grad=tracked)
    if tracked and tape is not None:
        tape.record(TapeEntry(name, inputs, output, rule))
    return output


def backward(
    tape: Tape,
    loss: Tensor,
    *,
    on_visit: Callable[[TapeEntry], None] | None = None,
) -> dict[int, Tensor]:
    """
    Replays the tape in reverse and accumulates gradients of `loss`.

    Returns:
        A map from tensor uid to its gradient. Tensors that do not influence
        the loss have no entry.
    """
    if loss.numel != 1:
        raise RejectedInputError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise RejectedInputError("loss is not reachable from the tape")

    grads: dict[int, Array] = {loss.uid: np.ones(loss.shape, dtype=loss.dtype)}
    for entry in reversed(tape.entries):
        if on_visit is not None:
            on_visit(entry)
        upstream = grads.get(entry.output.uid)
        if upstream is None:
            continue
        for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            grad = grad.astype(tensor.dtype, copy=False)
            existing = grads.get(tensor.uid)
            grads[tensor.uid] = grad if existing is None else existing + grad
    return {uid: Tensor._wrap(grad) for uid, grad in grads.items()}


# --- Shape Helpers ---
def _leading(shape: tuple[int, ...], trailing: int) -> int:
    return math.prod(shape[: len(shape) - trailing])


def _reduce_to_suffix(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sums a gradient over the leading axes that `shape` was broadcast along."""
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra))) if extra else grad


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim :] != b.shape:
        raise RejectedInputError(f"{op}: shape {b.shape} does not match trailing extents of {a.shape}")


# --- Operations ---
def matmul(a: Tensor, b: Tensor, *, tag: str = TAG_MATMUL) -> Tensor:
    """
    Matrix product over the last two axes; adds 2*m*k*n per product to the counters.

    `a` may carry leading batch axes. `b` is either a matrix shared by the
    whole batch or carries exactly the same leading axes as `a`.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise RejectedInputError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise RejectedInputError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise RejectedInputError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    m, k = a.shape[-2:]
    n = b.shape[-1]
    record_flops(2 * m * k * n * _leading(a.shape, 2), tag)
    result = np.matmul(a.data, b.data)

    def rule(grad: Array) -> tuple[Array, Array]:
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            grad_b = a.data.reshape(-1, k).T @ grad.reshape(-1, n)
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return grad_a, grad_b

    return emit_op("matmul", result, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may match only the trailing extents of `a` (bias add)."""
    _check_suffix(a, b, "add")

    def rule(grad: Array) -> tuple[Array, Array]:
        return grad, _reduce_to_suffix(grad, b.shape)

    return emit_op("add", a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")

    def rule(grad: Array) -> tuple[Array, Array]:
        return grad, -_reduce_to_suffix(grad, b.shape)

    return emit_op("sub", a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise RejectedInputError(f"mul: shapes differ {a.shape} vs {b.shape}")

    def rule(grad: Array) -> tuple[Array, Array]:
        return grad * b.data, grad * a.data

    return emit_op("mul", a.data * b.data, (a, b), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    def rule(grad: Array) -> tuple[Array]:
        return (grad * factor,)

    return emit_op("scale", x.data * x.dtype.type(factor), (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    def rule(grad: Array) -> tuple[Array]:
        return (np.broadcast_to(grad, x.shape).copy(),)

    return emit_op("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), rule)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.numel)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    target = tuple(shape)
    if math.prod(target) != x.numel:
        raise RejectedInputError(f"cannot reshape {x.shape} to {target}")

    def rule(grad: Array) -> tuple[Array]:
        return (grad.reshape(x.shape),)

    return emit_op("reshape", x.data.reshape(target), (x,), rule)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    order = tuple(axes)
    if sorted(order) != list(range(x.ndim)):
        raise RejectedInputError(f"invalid axes {order} for rank {x.ndim}")
    inverse = tuple(np.argsort(order))

    def rule(grad: Array) -> tuple[Array]:
        return (np.transpose(grad, inverse),)

    return emit_op("transpose", np.transpose(x.data, order), (x,), rule)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def rule(grad: Array) -> tuple[Array]:
        return (probs * (grad - (grad * probs).sum(axis=-1, keepdims=True)),)

    return emit_op("softmax_lastdim", probs, (x,), rule)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise RejectedInputError(f"layernorm: gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std
    result = normalized * gamma.data + beta.data

    def rule(grad: Array) -> tuple[Array, Array, Array]:
        grad_norm = grad * gamma.data
        grad_x = inv_std * (
            grad_norm
            - grad_norm.mean(axis=-1, keepdims=True)
            - normalized * (grad_norm * normalized).mean(axis=-1, keepdims=True)
        )
        grad_gamma = (grad * normalized).reshape(-1, d).sum(axis=0)
        grad_beta = grad.reshape(-1, d).sum(axis=0)
        return grad_x, grad_gamma, grad_beta

    return emit_op("layernorm", result, (x, gamma, beta), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), using erf."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))

    def rule(grad: Array) -> tuple[Array]:
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return (grad * (cdf + x.data * pdf),)

    return emit_op("gelu", (x.data * cdf).astype(x.dtype), (x,), rule)


def sample_norms(x: Tensor) -> Tensor:
    """L2 norm of each sample (axis 0) over all remaining axes."""
    flat = x.data.reshape(x.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))

    def rule(grad: Array) -> tuple[Array]:
        safe = np.where(norms > 0, norms, 1.0)
        direction = np.where(norms[:, None] > 0, flat / safe[:, None], 0.0)
        return ((grad[:, None] * direction).reshape(x.shape),)

    return emit_op("sample_norms", norms, (x,), rule)


def take_rows(x: Tensor, index: NDArray[np.integer]) -> Tensor:
    """Gathers rows (axis -2) of `x`: result has shape (..., *index.shape, d)."""
    if x.ndim < 2:
        raise RejectedInputError(f"take_rows needs rank >= 2, got {x.shape}")
    n, d = x.shape[-2:]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise RejectedInputError(f"row index out of range for {n} rows")
    result = x.data[..., index, :]
    flat_index = index.reshape(-1)

    def rule(grad: Array) -> tuple[Array]:
        lead = _leading(x.shape, 2)
        rows = np.moveaxis(grad.reshape(lead, flat_index.size, d), 1, 0).reshape(flat_index.size, lead * d)
        grad_rows = np.zeros((n, lead * d), dtype=grad.dtype)
        np.add.at(grad_rows, flat_index, rows)
        return (np.moveaxis(grad_rows.reshape(n, lead, d), 0, 1).reshape(x.shape),)

    return emit_op("take_rows", result, (x,), rule)


def put_rows(
    segments: Tensor,
    index: NDArray[np.integer],
    token_count: int,
    order: Sequence[int] | None = None,
) -> Tensor:
    """
    Writes segment rows back to their positions; inverse of `take_rows`.

    `index` must be an exact partition of range(token_count), so every output
    row is written exactly once and the segment `order` cannot change the result.
    """
    if segments.ndim < 3 or segments.shape[-3:-1] != index.shape:
        raise RejectedInputError(f"segments {segments.shape} do not match index {index.shape}")
    counts = np.bincount(index.reshape(-1), minlength=token_count)
    if counts.size != token_count or not np.all(counts == 1):
        raise RejectedInputError(f"index is not an exact partition of {token_count} rows")
    if order is not None and sorted(order) != list(range(index.shape[0])):
        raise RejectedInputError(f"order {list(order)} is not a permutation of {index.shape[0]} segments")

    lead = segments.shape[:-3]
    d = segments.shape[-1]
    result = np.zeros((*lead, token_count, d), dtype=segments.dtype)
    for s in range(index.shape[0]) if order is None else order:
        result[..., index[s], :] = segments.data[..., s, :, :]

    def rule(grad: Array) -> tuple[Array]:
        return (grad[..., index, :],)

    return emit_op("put_rows", result, (segments,), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, *, tag: str = TAG_MATMUL) -> Tensor:
    projected = matmul(x, weight, tag=tag)
    return projected if bias is None else add(projected, bias)
