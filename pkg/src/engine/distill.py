"""
Layer-wise progressive distillation followed by logit-level distillation.

During the layer-wise phase, student block i is pulled towards teacher block
2i for the first k block pairs, where k grows from 1 to the student depth
over the phase:

    k = ceil(iteration * L_student / total_iterations)

The logit phase then matches the final encoder outputs. Both phases use Adam.
"""
from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .checkpoint import params_checksum
from .encoder3d import LayerOutputs, Params, ViTConfig, encode
from .errors import NonFiniteLossError, RejectedInputError
from .tensor_core import (
    Rng,
    Tape,
    Tensor,
    add,
    backward,
    matmul,
    mean_all,
    reshape,
    sample_norms,
    scale,
    sub,
)

logger = logging.getLogger(__name__)

LossNorm = Literal["plain_l2", "rms"]
Phase = Literal["layerwise", "logit"]
STUDENT_DEPTH = 6


# --- Configuration ---
class DistillConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    total_iterations: int = Field(default=36, ge=STUDENT_DEPTH)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=5e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    logit_phase_iterations: int = Field(default=12, ge=0)
    seed: int = 42
    loss_norm: LossNorm = "plain_l2"
    schedule: Literal["progressive", "logit_only"] = "progressive"


# --- History ---
class TrainRecord(BaseModel):
    iteration: int
    phase: Phase
    k: int | None
    loss: float
    seed: int = 0
    elapsed_ms: float = 0.0


class TrainHistory(BaseModel):
    records: list[TrainRecord] = Field(default_factory=list)

    def k_trace(self) -> list[int]:
        return [record.k for record in self.records if record.phase == "layerwise" and record.k is not None]

    def losses(self, phase: Phase = "layerwise") -> list[float]:
        return [record.loss for record in self.records if record.phase == phase]

    def deterministic_view(self) -> list[tuple[int, str, int | None, float]]:
        return [(r.iteration, r.phase, r.k, r.loss) for r in self.records]

    def to_history_jsonl(self) -> str:
        """One line per iteration: seed, iteration, phase, k, loss."""
        return "".join(
            json.dumps({"seed": r.seed, "iteration": r.iteration, "phase": r.phase, "k": r.k, "loss": r.loss}) + "\n"
            for r in self.records
        )

    def to_timing_jsonl(self) -> str:
        return "".join(
            json.dumps({"iteration": r.iteration, "elapsed_ms": round(r.elapsed_ms, 3)}) + "\n"
            for r in self.records
        )

    @classmethod
    def from_jsonl(cls, history: str, timing: str | None = None) -> TrainHistory:
        elapsed: dict[int, float] = {}
        if timing:
            for line in timing.splitlines():
                row = json.loads(line)
                elapsed[row["iteration"]] = row["elapsed_ms"]
        records = [
            TrainRecord(**row, elapsed_ms=elapsed.get(row["iteration"], 0.0))
            for row in map(json.loads, history.splitlines())
        ]
        return cls(records=records)


# --- Schedule and Losses ---
def schedule_k(current_iteration: int, total_iterations: int, num_matched: int = STUDENT_DEPTH) -> int:
    """ceil(current * num_matched / total) for a 1-based iteration."""
    if total_iterations < 1 or not 1 <= current_iteration <= total_iterations:
        raise RejectedInputError(f"iteration {current_iteration} is outside 1..{total_iterations}")
    return -(-current_iteration * num_matched // total_iterations)


def _batched(t: Tensor) -> Tensor:
    return t if t.ndim == 3 else reshape(t, (1, *t.shape))


def _matched_distance(teacher: Tensor, student: Tensor, mode: LossNorm) -> Tensor:
    if teacher.shape != student.shape:
        raise RejectedInputError(f"matched outputs differ in shape: {teacher.shape} vs {student.shape}")
    diff = _batched(sub(teacher, student))
    distance = mean_all(sample_norms(diff))
    if mode == "rms":
        distance = scale(distance, 1.0 / math.sqrt(diff.numel // diff.shape[0]))
    return distance


def layerwise_loss(
    teacher_outs: LayerOutputs,
    student_outs: LayerOutputs,
    k: int,
    mode: LossNorm = "plain_l2",
    projections: Mapping[int, Tensor] | None = None,
) -> Tensor:
    """
    (1/k) * sum_{i=1..k} ||teacher[2i] - student[i]||, batch-averaged.

    The norm is the per-sample L2 norm of the flattened difference (divided by
    sqrt(numel) in rms mode). `projections[i]` maps student block i to the
    teacher width when the two differ.
    """
    depth = len(student_outs)
    if len(teacher_outs) != 2 * depth:
        raise RejectedInputError(f"teacher has {len(teacher_outs)} layers, expected {2 * depth}")
    if not 1 <= k <= depth:
        raise RejectedInputError(f"k={k} is outside 1..{depth}")

    total: Tensor | None = None
    for i in range(1, k + 1):
        student = student_outs[i - 1]
        if projections is not None and i in projections:
            student = matmul(student, projections[i])
        term = _matched_distance(teacher_outs[2 * i - 1], student, mode)
        total = term if total is None else add(total, term)
    assert total is not None
    return scale(total, 1.0 / k)


def logit_loss(teacher_final: Tensor, student_final: Tensor, mode: LossNorm = "plain_l2") -> Tensor:
    """Batch-mean L2 norm between final encoder outputs."""
    return _matched_distance(teacher_final, student_final, mode)


# --- Optimizer ---
@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_adam_state(params: Params) -> AdamState:
    return AdamState(
        first_moment={name: np.zeros(t.shape) for name, t in params.items()},
        second_moment={name: np.zeros(t.shape) for name, t in params.items()},
    )


def adam_step(
    params: Params,
    grads: Mapping[str, Tensor | None],
    state: AdamState,
    cfg: DistillConfig,
) -> tuple[Params, AdamState]:
    """
    One bias-corrected Adam update. Missing gradients count as zero.

    Moments are kept in float64; each parameter keeps its own dtype.
    """
    step = state.step + 1
    correction1 = 1.0 - cfg.beta1**step
    correction2 = 1.0 - cfg.beta2**step
    updated: Params = {}
    first: dict[str, np.ndarray] = {}
    second: dict[str, np.ndarray] = {}

    for name, param in params.items():
        grad_tensor = grads.get(name)
        grad = np.zeros(param.shape) if grad_tensor is None else grad_tensor.data.astype(np.float64)
        if grad.shape != param.shape:
            raise RejectedInputError(f"gradient for {name} has shape {grad.shape}, expected {param.shape}")
        m = cfg.beta1 * state.first_moment.get(name, 0.0) + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * state.second_moment.get(name, 0.0) + (1.0 - cfg.beta2) * grad * grad
        delta = cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        values = (param.data.astype(np.float64) - delta).astype(param.dtype)
        updated[name] = Tensor(values, requires_grad=param.requires_grad, name=name)
        first[name], second[name] = m, v
    return updated, AdamState(first, second, step)


# --- Data ---
def synthetic_volumes(extent: int, batch_size: int, rng: Rng, num_waves: int = 4) -> Iterator[Tensor]:
    """Endless batches of Gaussian noise plus a few random low-frequency 3D cosines."""
    axis = np.arange(extent, dtype=np.float64) / extent
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"))  # (3, D, H, W)
    while True:
        volumes = rng.normal((batch_size, extent, extent, extent), dtype=np.float64)
        frequencies = rng.integers(1, 4, size=(batch_size, num_waves, 3))
        phases = rng.uniform((batch_size, num_waves), 0.0, 2.0 * np.pi)
        amplitudes = rng.uniform((batch_size, num_waves), 0.5, 1.5)
        for b in range(batch_size):
            for wave in range(num_waves):
                argument = 2.0 * np.pi * np.tensordot(frequencies[b, wave], grid, axes=1) + phases[b, wave]
                volumes[b] += amplitudes[b, wave] * np.cos(argument)
        yield Tensor(volumes.astype(np.float32))


# --- Training ---
@dataclass
class DistillResult:
    history: TrainHistory
    student_params: Params
    projections: Params
    teacher_checksum_before: str
    teacher_checksum_after: str


def init_layer_projections(student_cfg: ViTConfig, teacher_cfg: ViTConfig, rng: Rng) -> Params:
    """Learned student->teacher width maps, one per student block; empty when widths match."""
    if student_cfg.embed_dim == teacher_cfg.embed_dim:
        return {}
    shape = (student_cfg.embed_dim, teacher_cfg.embed_dim)
    return {
        f"distill.proj.{i}": Tensor(rng.truncated_normal(shape, 0.02), requires_grad=True, name=f"distill.proj.{i}")
        for i in range(1, student_cfg.num_layers + 1)
    }


def check_compatible(teacher_cfg: ViTConfig, student_cfg: ViTConfig, projections: Params) -> None:
    if teacher_cfg.num_layers != 2 * student_cfg.num_layers:
        raise RejectedInputError(
            f"teacher depth {teacher_cfg.num_layers} must be twice the student depth {student_cfg.num_layers}"
        )
    if teacher_cfg.num_tokens != student_cfg.num_tokens:
        raise RejectedInputError(
            f"token counts differ: teacher {teacher_cfg.num_tokens}, student {student_cfg.num_tokens}"
        )
    if teacher_cfg.embed_dim != student_cfg.embed_dim and len(projections) != student_cfg.num_layers:
        raise RejectedInputError("student and teacher widths differ and no layer projections were given")


def distill_train(
    teacher_cfg: ViTConfig,
    teacher_params: Params,
    student_cfg: ViTConfig,
    student_params: Params,
    data: Iterator[Tensor],
    cfg: DistillConfig,
    projections: Params | None = None,
) -> DistillResult:
    """
    Trains the student against the frozen teacher and records every iteration.

    Raises:
        RejectedInputError: incompatible teacher/student configurations.
        NonFiniteLossError: a loss became NaN or infinite.
    """
    projections = dict(projections or {})
    check_compatible(teacher_cfg, student_cfg, projections)
    checksum_before = params_checksum(teacher_params)

    trainable: Params = {
        name: Tensor(t.data, requires_grad=True, name=name)
        for name, t in {**student_params, **projections}.items()
    }
    state = init_adam_state(trainable)
    history = TrainHistory()

    if cfg.schedule == "progressive":
        plan: list[tuple[Phase, int | None]] = [
            ("layerwise", schedule_k(i, cfg.total_iterations, student_cfg.num_layers))
            for i in range(1, cfg.total_iterations + 1)
        ]
        plan += [("logit", None)] * cfg.logit_phase_iterations
    else:
        plan = [("logit", None)] * (cfg.total_iterations + cfg.logit_phase_iterations)

    logger.info(
        "Starting distillation: %d iterations (%s schedule), batch %d, lr %g",
        len(plan), cfg.schedule, cfg.batch_size, cfg.learning_rate,
    )
    for iteration, (phase, k) in enumerate(plan, start=1):
        start = time.perf_counter()
        volume = next(data)
        teacher_outs = encode(volume, teacher_cfg, teacher_params)
        student = {name: trainable[name] for name in student_params}
        matched = {
            i: trainable[f"distill.proj.{i}"] for i in range(1, student_cfg.num_layers + 1)
            if f"distill.proj.{i}" in trainable
        }

        with Tape() as tape:
            student_outs = encode(volume, student_cfg, student, tape)
            if phase == "layerwise":
                assert k is not None
                loss = layerwise_loss(teacher_outs, student_outs, k, cfg.loss_norm, matched)
            else:
                final = student_outs.final
                if student_cfg.num_layers in matched:
                    final = matmul(final, matched[student_cfg.num_layers])
                loss = logit_loss(teacher_outs.final, final, cfg.loss_norm)

        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss {value} at iteration {iteration} ({phase} phase, k={k})")

        grads = backward(tape, loss)
        named = {name: grads.get(t.uid) for name, t in trainable.items()}
        trainable, state = adam_step(trainable, named, state, cfg)

        elapsed_ms = (time.perf_counter() - start) * 1000.0
        history.records.append(TrainRecord(
            iteration=iteration, phase=phase, k=k, loss=value, seed=cfg.seed, elapsed_ms=elapsed_ms,
        ))
        logger.debug("iteration %d %s k=%s loss=%.6f (%.1f ms)", iteration, phase, k, value, elapsed_ms)
        if phase == "layerwise" and iteration == cfg.total_iterations:
            logger.info("Layer-wise phase complete (loss %.6f).", value)

    checksum_after = params_checksum(teacher_params)
    logger.info("Distillation finished after %d iterations.", len(plan))
    return DistillResult(
        history=history,
        student_params={name: trainable[name] for name in student_params},
        projections={name: trainable[name] for name in projections},
        teacher_checksum_before=checksum_before,
        teacher_checksum_after=checksum_after,
    )
