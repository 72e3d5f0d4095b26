"""
Finite-difference gradient checks for every differentiable operation.

The analytic gradient comes from the float32 tape. The reference is a central
difference (step 1e-3) of the same function evaluated in float64. Each
registered operation is checked on three seeded shapes and reported as one
`CheckResult` carrying the worst relative error

    ||analytic - numeric|| / max(||analytic||, ||numeric||)

over its checked inputs.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionConfig,
    AttentionWeights,
    flash_attention,
    flash_mhsa,
    naive_attention,
    naive_mhsa,
    sparse_flash_mhsa,
    sparse_mhsa,
)
from .checks import CheckResult
from .distill import layerwise_loss, logit_loss
from .encoder3d import Params, ViTConfig, encode, param_shapes
from .errors import RejectedInputError, SparseFlashError
from .tensor_core import (
    Rng,
    Tape,
    Tensor,
    add,
    backward,
    gelu,
    layernorm,
    matmul,
    mean_all,
    mul,
    put_rows,
    reshape,
    sample_norms,
    scale,
    softmax_lastdim,
    sub,
    sum_all,
    take_rows,
    transpose,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1e-3
DEFAULT_STEP = 1e-3
MAX_COORDS = 12

Inputs = dict[str, Tensor]


@dataclass(frozen=True)
class GradCase:
    """One seeded evaluation point: float64 input values and a scalar-valued function."""

    label: str
    values: dict[str, np.ndarray]
    checked: tuple[str, ...]
    fn: Callable[[Inputs], Tensor]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    largest = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if largest == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / largest


def _tensors(values: dict[str, np.ndarray], dtype: type[np.floating], checked: Sequence[str] = ()) -> Inputs:
    return {name: Tensor(array.astype(dtype), requires_grad=name in checked) for name, array in values.items()}


def gradcheck(case: GradCase, rng: Rng, *, step: float = DEFAULT_STEP, max_coords: int = MAX_COORDS) -> float:
    """Worst relative error over the case's checked inputs (sampled coordinates)."""
    analytic_inputs = _tensors(case.values, np.float32, case.checked)
    with Tape() as tape:
        loss = case.fn(analytic_inputs)
    grads = backward(tape, loss)

    worst = 0.0
    for name in case.checked:
        base = case.values[name]
        grad = grads.get(analytic_inputs[name].uid)
        analytic_full = np.zeros(base.shape) if grad is None else grad.data.astype(np.float64)
        coords = rng.permutation(base.size)[:max_coords]

        analytic = analytic_full.reshape(-1)[coords]
        numeric = np.empty(coords.size)
        for slot, coord in enumerate(coords):
            numeric[slot] = _central_difference(case, name, int(coord), step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _central_difference(case: GradCase, name: str, coord: int, step: float) -> float:
    def evaluate(offset: float) -> float:
        shifted = dict(case.values)
        perturbed = case.values[name].copy().reshape(-1)
        perturbed[coord] += offset
        shifted[name] = perturbed.reshape(case.values[name].shape)
        return case.fn(_tensors(shifted, np.float64)).item()

    return (evaluate(step) - evaluate(-step)) / (2.0 * step)


# --- Case Builders ---
def _case(
    rng: Rng,
    label: str,
    shapes: dict[str, tuple[int, ...]],
    out_shape: tuple[int, ...],
    op: Callable[[Inputs], Tensor],
    std: float = 1.0,
    checked: Sequence[str] | None = None,
) -> GradCase:
    """Checks `sum(op(inputs) * weights)` with fixed random weights, so no output direction is degenerate."""
    values = {name: rng.normal(shape, std, np.float64) for name, shape in shapes.items()}
    values["weights"] = rng.normal(out_shape, 1.0, np.float64)

    def fn(t: Inputs) -> Tensor:
        return sum_all(mul(op(t), t["weights"]))

    return GradCase(label, values, tuple(shapes if checked is None else checked), fn)


def _matmul_cases(rng: Rng) -> list[GradCase]:
    shapes = (((3, 4), (4, 5), (3, 5)), ((5, 2), (2, 3), (5, 3)), ((2, 3, 4), (4, 2), (2, 3, 2)))
    return [_case(rng, f"{a}@{b}", {"a": a, "b": b}, out, lambda t: matmul(t["a"], t["b"])) for a, b, out in shapes]


def _binary_cases(rng: Rng, op: Callable[[Tensor, Tensor], Tensor]) -> list[GradCase]:
    shapes = (((3, 4), (4,)), ((2, 3, 4), (3, 4)), ((5,), (5,)))
    return [_case(rng, f"{a},{b}", {"a": a, "b": b}, a, lambda t: op(t["a"], t["b"])) for a, b in shapes]


def _mul_cases(rng: Rng) -> list[GradCase]:
    return [_case(rng, str(s), {"a": s, "b": s}, s, lambda t: mul(t["a"], t["b"])) for s in ((3, 4), (2, 2, 3), (6,))]


def _scale_cases(rng: Rng) -> list[GradCase]:
    cases = []
    for shape, factor in (((3, 4), 0.7), ((5,), -1.5), ((2, 3, 2), 3.0)):
        cases.append(_case(rng, f"{shape}*{factor}", {"x": shape}, shape, lambda t, f=factor: scale(t["x"], f)))
    return cases


def _reduction_cases(rng: Rng, op: Callable[[Tensor], Tensor]) -> list[GradCase]:
    return [_case(rng, str(s), {"x": s}, (), lambda t: op(t["x"])) for s in ((3, 4), (7,), (2, 3, 2))]


def _reshape_cases(rng: Rng) -> list[GradCase]:
    cases = []
    for shape, target in (((3, 4), (2, 6)), ((2, 3, 4), (4, 6)), ((6,), (2, 3))):
        cases.append(_case(rng, f"{shape}->{target}", {"x": shape}, target,
                           lambda t, s=target: reshape(t["x"], s)))
    return cases


def _transpose_cases(rng: Rng) -> list[GradCase]:
    cases = []
    for shape, axes in (((3, 4), (1, 0)), ((2, 3, 4), (2, 0, 1)), ((2, 3, 4, 2), (0, 2, 1, 3))):
        out = tuple(shape[a] for a in axes)
        cases.append(_case(rng, f"{shape}{axes}", {"x": shape}, out, lambda t, a=axes: transpose(t["x"], a)))
    return cases


def _unary_cases(rng: Rng, op: Callable[[Tensor], Tensor]) -> list[GradCase]:
    return [_case(rng, str(s), {"x": s}, s, lambda t: op(t["x"])) for s in ((3, 4), (2, 3, 5), (8,))]


def _layernorm_cases(rng: Rng) -> list[GradCase]:
    cases = []
    for shape in ((3, 4), (2, 3, 5), (1, 8)):
        d = shape[-1]
        cases.append(_case(rng, str(shape), {"x": shape, "gamma": (d,), "beta": (d,)}, shape,
                           lambda t: layernorm(t["x"], t["gamma"], t["beta"])))
    return cases


def _sample_norm_cases(rng: Rng) -> list[GradCase]:
    return [_case(rng, str(s), {"x": s}, (s[0],), lambda t: sample_norms(t["x"])) for s in ((3, 4), (2, 3, 2), (4, 5))]


def _take_rows_cases(rng: Rng) -> list[GradCase]:
    cases = []
    for shape, index_shape in (((5, 3), (2, 3)), ((2, 6, 4), (3,)), ((4, 2), (2, 2))):
        index = rng.integers(0, shape[-2], size=index_shape)
        out = (*shape[:-2], *index_shape, shape[-1])
        cases.append(_case(rng, f"{shape}[{index_shape}]", {"x": shape}, out,
                           lambda t, i=index: take_rows(t["x"], i)))
    return cases


def _put_rows_cases(rng: Rng) -> list[GradCase]:
    cases = []
    for shape in ((2, 3, 4), (3, 2, 2), (2, 2, 2, 3)):
        *lead, s, w, d = shape
        index = rng.permutation(s * w).reshape(s, w)
        out = (*lead, s * w, d)
        cases.append(_case(rng, str(shape), {"segments": shape}, out,
                           lambda t, i=index, n=s * w: put_rows(t["segments"], i, n)))
    return cases


def _core_cases(rng: Rng, core: Callable[[Tensor, Tensor, Tensor], Tensor]) -> list[GradCase]:
    cases = []
    for shape in ((2, 5, 3), (3, 4, 2), (2, 2, 6, 3)):
        cases.append(_case(rng, str(shape), {"q": shape, "k": shape, "v": shape}, shape,
                           lambda t: core(t["q"], t["k"], t["v"])))
    return cases


def _flash_core(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return flash_attention(q, k, v, tile_rows=2, tile_cols=3, workers=1)


_WEIGHT_NAMES = ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")
# Softmax is invariant to a per-row shift, so the key bias has an exactly zero gradient.
_MHSA_CHECKED = ("x", *(name for name in _WEIGHT_NAMES if name != "bk"))


def _mhsa_cases(rng: Rng, op: Callable[[Tensor, AttentionWeights, AttentionConfig], Tensor]) -> list[GradCase]:
    cases = []
    for x_shape, heads in (((8, 4), 2), ((8, 6), 3), ((2, 8, 4), 2)):
        d = x_shape[-1]
        cfg = AttentionConfig(embed_dim=d, num_heads=heads, segment_size=2, dilation_interval=2, tile_rows=2, tile_cols=3)
        shapes = {"x": x_shape, **{n: (d, d) if n.startswith("w") else (d,) for n in _WEIGHT_NAMES}}

        def fn(t: Inputs, c: AttentionConfig = cfg) -> Tensor:
            return op(t["x"], AttentionWeights(**{n: t[n] for n in _WEIGHT_NAMES}), c)

        cases.append(_case(rng, f"x{x_shape},h={heads}", shapes, x_shape, fn, std=0.5, checked=_MHSA_CHECKED))
    return cases


# --- Encoder-level Cases ---
_ENCODER_CHECKED = (
    "patch_embed.weight",
    "pos_embed",
    "blocks.0.ffn.w1",
    "blocks.1.norm1.gamma",
    "blocks.1.attn.wq",
    "blocks.1.attn.wv",
    "blocks.1.ffn.b2",
)


def toy_encoder_pair(variant: str = "sparse_flash") -> tuple[ViTConfig, ViTConfig]:
    """A 4-block teacher and 2-block student (first block FFN-only) over 8 tokens."""
    shared = dict(input_extent=4, patch_size=2, embed_dim=8, num_heads=2, ffn_hidden_ratio=2)
    teacher = ViTConfig(num_layers=4, **shared)  # type: ignore[arg-type]
    student = ViTConfig(
        num_layers=2, ffn_only_prefix=1, attention_variant=variant, segment_size=4, dilation_interval=2,
        tile_rows=2, tile_cols=2, **shared,  # type: ignore[arg-type]
    )
    return teacher, student


def _toy_params(cfg: ViTConfig, rng: Rng) -> dict[str, np.ndarray]:
    values: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            values[name] = 1.0 + rng.normal(shape, 0.1, np.float64)
        elif len(shape) == 1:
            values[name] = rng.normal(shape, 0.1, np.float64)
        else:
            values[name] = rng.normal(shape, 1.0 / math.sqrt(shape[0]), np.float64)
    return values


def _split(t: Inputs, prefix: str) -> Params:
    return {name[len(prefix):]: tensor for name, tensor in t.items() if name.startswith(prefix)}


def _layerwise_cases(rng: Rng) -> list[GradCase]:
    cases = []
    for variant, k in (("sparse_flash", 2), ("naive", 1), ("flash", 2)):
        teacher_cfg, student_cfg = toy_encoder_pair(variant)
        values = {"volume": rng.normal((2, 4, 4, 4), 1.0, np.float64)}
        values.update({f"teacher.{n}": v for n, v in _toy_params(teacher_cfg, rng).items()})
        values.update({f"student.{n}": v for n, v in _toy_params(student_cfg, rng).items()})

        def fn(t: Inputs, tc: ViTConfig = teacher_cfg, sc: ViTConfig = student_cfg, k_: int = k) -> Tensor:
            teacher_outs = encode(t["volume"], tc, _split(t, "teacher."))
            student_outs = encode(t["volume"], sc, _split(t, "student."))
            return layerwise_loss(teacher_outs, student_outs, k_)

        checked = tuple(f"student.{name}" for name in _ENCODER_CHECKED)
        cases.append(GradCase(f"{variant},k={k}", values, checked, fn))
    return cases


def _logit_cases(rng: Rng) -> list[GradCase]:
    cases = []
    for shape, mode in (((2, 4, 3), "plain_l2"), ((3, 2, 2), "rms"), ((1, 5, 4), "plain_l2")):
        values = {"teacher": rng.normal(shape, 1.0, np.float64), "student": rng.normal(shape, 1.0, np.float64)}

        def fn(t: Inputs, m: str = mode) -> Tensor:
            return logit_loss(t["teacher"], t["student"], m)  # type: ignore[arg-type]

        cases.append(GradCase(f"{shape},{mode}", values, ("student",), fn))
    return cases


CaseBuilder = Callable[[Rng], list[GradCase]]

OP_REGISTRY: dict[str, CaseBuilder] = {
    "matmul": _matmul_cases,
    "add": lambda rng: _binary_cases(rng, add),
    "sub": lambda rng: _binary_cases(rng, sub),
    "mul": _mul_cases,
    "scale": _scale_cases,
    "sum_all": lambda rng: _reduction_cases(rng, sum_all),
    "mean_all": lambda rng: _reduction_cases(rng, mean_all),
    "reshape": _reshape_cases,
    "transpose": _transpose_cases,
    "softmax_lastdim": lambda rng: _unary_cases(rng, softmax_lastdim),
    "layernorm": _layernorm_cases,
    "gelu": lambda rng: _unary_cases(rng, gelu),
    "sample_norms": _sample_norm_cases,
    "take_rows": _take_rows_cases,
    "put_rows": _put_rows_cases,
    "naive_attention": lambda rng: _core_cases(rng, naive_attention),
    "flash_attention": lambda rng: _core_cases(rng, _flash_core),
    "naive_mhsa": lambda rng: _mhsa_cases(rng, naive_mhsa),
    "flash_mhsa": lambda rng: _mhsa_cases(rng, flash_mhsa),
    "sparse_mhsa": lambda rng: _mhsa_cases(rng, sparse_mhsa),
    "sparse_flash_mhsa": lambda rng: _mhsa_cases(rng, sparse_flash_mhsa),
    "logit_loss": _logit_cases,
    "layerwise_loss": _layerwise_cases,
}


def registered_ops() -> list[str]:
    return list(OP_REGISTRY)


def run_gradchecks(
    *,
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    ops: Sequence[str] | None = None,
) -> list[CheckResult]:
    """Checks each registered operation on its seeded shapes; one result per operation."""
    names = registered_ops() if ops is None else list(ops)
    unknown = [name for name in names if name not in OP_REGISTRY]
    if unknown:
        raise RejectedInputError(f"unknown gradcheck ops: {', '.join(unknown)}")
    if threshold <= 0:
        raise RejectedInputError(f"threshold must be positive, got {threshold}")

    results = []
    for index, name in enumerate(names):
        rng = Rng(seed * 1000 + index)
        try:
            cases = OP_REGISTRY[name](rng)
            errors = {case.label: gradcheck(case, rng, step=step) for case in cases}
        except (SparseFlashError, ValueError, ArithmeticError) as exc:
            logger.error("gradcheck %s raised: %s", name, exc)
            results.append(CheckResult(
                name=name, passed=False, metric=math.inf, threshold=threshold, cases=0,
                detail=f"raised {type(exc).__name__}: {exc}",
            ))
            continue
        worst_label = max(errors, key=errors.__getitem__)
        worst = errors[worst_label]
        passed = worst <= threshold
        logger.log(logging.INFO if passed else logging.WARNING,
                   "gradcheck %s: max rel err %.3e over %d shapes", name, worst, len(cases))
        results.append(CheckResult(
            name=name, passed=passed, metric=worst, threshold=threshold, cases=len(cases),
            detail=f"worst shape {worst_label}",
        ))
    return results
