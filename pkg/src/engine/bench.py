"""
Cost accounting for attention variants and whole encoders.

Flops follow the multiply-add convention (one multiply-add = 2 flops) and
count matrix products only:

    projections     8 * N * d^2
    dense core      4 * N^2 * d
    sparse core     4 * N * w * d
    FFN             2 * ffn_ratio * 2 * N * d^2
    patch embed     2 * N * p^3 * d

Memory is the peak transient scratch allocation seen by the operation
counter, not resident parameters or activations.
"""
from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable, Sequence
from functools import partial
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tabulate import tabulate

from .attention import (
    ATTENTION_VARIANTS,
    AttentionConfig,
    AttentionVariant,
    get_attention,
    init_attention_weights,
    is_sparse,
)
from .encoder3d import ViTConfig
from .errors import RejectedInputError
from .tensor_core import TAG_ATTENTION_CORE, OpCounter, Rng, Tensor, count_ops

logger = logging.getLogger(__name__)

MIN_REPETITIONS = 11
MIN_WARMUPS = 3
MEMORY_METRIC = "peak_transient_scratch_bytes"
REPORTS_CSV = "reports.csv"
REPORTS_JSONL = "reports.jsonl"


# --- Analytic Model ---
def _check_variant(variant: str) -> None:
    if variant not in ATTENTION_VARIANTS:
        raise RejectedInputError(f"unknown attention variant {variant!r}; expected one of {', '.join(ATTENTION_VARIANTS)}")


def analytic_core_flops(variant: str, n: int, d: int, w: int | None = None, batch: int = 1) -> int:
    """Scores plus weighted sum: 4*N^2*d dense, 4*N*w*d restricted to segments."""
    _check_variant(variant)
    if not is_sparse(variant):
        return 4 * n * n * d * batch
    if w is None or not 1 <= w <= n:
        raise RejectedInputError(f"sparse variant {variant} needs 1 <= w <= N, got w={w}, N={n}")
    return 4 * n * w * d * batch


def analytic_attention_flops(variant: str, n: int, d: int, w: int | None = None, batch: int = 1) -> int:
    return 8 * n * d * d * batch + analytic_core_flops(variant, n, d, w, batch)


def analytic_flops(
    variant: str,
    n: int,
    d: int,
    h: int,
    w: int,
    r: int,
    ffn_ratio: int,
    layers: int,
    ffn_only_prefix: int,
    patch_size: int | None = None,
    batch: int = 1,
) -> int:
    """
    Forward flops of a full encoder.

    Blocks with index < ffn_only_prefix contribute FFN flops only. The patch
    embedding term is included when `patch_size` is given.
    """
    _check_variant(variant)
    if min(n, d, h, w, r, ffn_ratio, layers, batch) < 1 or not 0 <= ffn_only_prefix <= layers:
        raise RejectedInputError(
            f"invalid cost configuration: N={n}, d={d}, h={h}, w={w}, r={r}, layers={layers}, "
            f"ffn_only_prefix={ffn_only_prefix}"
        )
    if d % h:
        raise RejectedInputError(f"embed_dim {d} is not divisible by num_heads {h}")
    if is_sparse(variant) and n % (w * r):
        raise RejectedInputError(f"token count N={n} is not divisible by w*r with w={w}, r={r}")

    ffn = 2 * ffn_ratio * 2 * n * d * d * batch
    attention = analytic_attention_flops(variant, n, d, w, batch)
    total = layers * ffn + (layers - ffn_only_prefix) * attention
    if patch_size is not None:
        total += 2 * n * patch_size**3 * d * batch
    return total


def encoder_flops(cfg: ViTConfig, batch: int = 1) -> int:
    return analytic_flops(
        cfg.attention_variant, cfg.num_tokens, cfg.embed_dim, cfg.num_heads, cfg.segment_size,
        cfg.dilation_interval, cfg.ffn_hidden_ratio, cfg.num_layers, cfg.ffn_only_prefix,
        patch_size=cfg.patch_size, batch=batch,
    )


# --- Timing ---
class TimingStats(BaseModel):
    median_ms: float
    iqr_ms: float
    samples_ms: list[float]
    repetitions: int
    warmups: int


def measure(runner: Callable[[], object], repetitions: int = MIN_REPETITIONS, warmups: int = MIN_WARMUPS) -> TimingStats:
    """Runs `warmups` unrecorded calls, then times `repetitions` calls on a monotonic clock."""
    if repetitions < 1 or warmups < 0:
        raise RejectedInputError(f"need repetitions >= 1 and warmups >= 0, got {repetitions} and {warmups}")
    for _ in range(warmups):
        runner()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        runner()
        samples.append((time.perf_counter() - start) * 1000.0)
    q1, median, q3 = np.percentile(samples, [25, 50, 75])
    return TimingStats(
        median_ms=float(median), iqr_ms=float(q3 - q1), samples_ms=samples, repetitions=repetitions, warmups=warmups
    )


# --- Benchmark Cases and Reports ---
class BenchSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    repetitions: int = Field(default=MIN_REPETITIONS, ge=MIN_REPETITIONS)
    warmups: int = Field(default=MIN_WARMUPS, ge=MIN_WARMUPS)
    batch: int = Field(default=1, ge=1)
    seed: int = 0


class BenchCase(BaseModel):
    variant: AttentionVariant
    token_count: int = Field(gt=0)
    attention: AttentionConfig

    @model_validator(mode="after")
    def _segments_fit(self) -> BenchCase:
        span = self.attention.segment_size * self.attention.dilation_interval
        if is_sparse(self.variant) and self.token_count % span:
            raise ValueError(
                f"token count N={self.token_count} is not divisible by w*r with "
                f"w={self.attention.segment_size}, r={self.attention.dilation_interval}"
            )
        return self

    @property
    def sparse(self) -> bool:
        return is_sparse(self.variant)

    @property
    def flash(self) -> bool:
        return "flash" in self.variant

    @property
    def segment(self) -> tuple[int, int]:
        """(w, r); dense variants report the dense limit (N, 1)."""
        if self.sparse:
            return self.attention.segment_size, self.attention.dilation_interval
        return self.token_count, 1


class CostReport(BaseModel):
    variant: str
    N: int
    d: int
    h: int
    w: int
    r: int
    tile_rows: int
    tile_cols: int
    batch: int
    seed: int
    sparse: bool
    flash: bool
    analytic_flops: int
    measured_flops: int
    core_flops: int
    peak_bytes: int
    memory_metric: str = MEMORY_METRIC
    time_ms_median: float
    time_ms_iqr: float
    repetitions: int
    warmups: int
    speedup: float
    flops_speedup: float

    @property
    def flops_match(self) -> bool:
        return self.measured_flops == self.analytic_flops


def make_case(
    variant: str,
    n: int,
    d: int,
    h: int,
    w: int | None = None,
    r: int = 1,
    tiles: int = 16,
) -> BenchCase:
    """Builds a validated case; `w` defaults to N/8 for sparse variants."""
    _check_variant(variant)
    segment = n // 8 if w is None else w
    try:
        attention = AttentionConfig(
            embed_dim=d, num_heads=h, segment_size=max(segment, 1), dilation_interval=r,
            tile_rows=tiles, tile_cols=tiles,
        )
        return BenchCase(variant=variant, token_count=n, attention=attention)  # type: ignore[arg-type]
    except ValueError as e:
        raise RejectedInputError(str(e)) from e


def ablation_cases(n: int, d: int, h: int, w: int | None = None, r: int = 1, tiles: int = 16) -> list[BenchCase]:
    """The {sparse off/on} x {flash off/on} grid at one configuration."""
    return [make_case(variant, n, d, h, w, r, tiles) for variant in ATTENTION_VARIANTS]


def compare_variants(cases: Sequence[BenchCase], settings: BenchSettings | None = None) -> list[CostReport]:
    """
    Measures every case on one shared seeded input.

    Wall-time speedups are relative to the `naive` case when present,
    otherwise to the first case. The flops speedup is always relative to
    the dense core, so it equals N/w for sparse variants.
    """
    settings = settings or BenchSettings()
    if not cases:
        raise RejectedInputError("compare_variants needs at least one case")
    first = cases[0]
    key = (first.token_count, first.attention.embed_dim, first.attention.num_heads)
    for case in cases[1:]:
        other = (case.token_count, case.attention.embed_dim, case.attention.num_heads)
        if other != key:
            raise RejectedInputError(f"cases must share N, d and h: {key} vs {other}")

    n, d, h = key
    rng = Rng(settings.seed)
    shape = (n, d) if settings.batch == 1 else (settings.batch, n, d)
    x = Tensor(rng.normal(shape))
    wts = init_attention_weights(d, rng)

    measured: list[tuple[OpCounter, TimingStats]] = []
    for case in cases:
        run = partial(get_attention(case.variant), x, wts, case.attention)
        with count_ops() as counter:
            run()
        timing = measure(run, settings.repetitions, settings.warmups)
        logger.info("%s N=%d: %.3f ms median, %d flops", case.variant, n, timing.median_ms, counter.flops)
        measured.append((counter, timing))

    variants = [case.variant for case in cases]
    baseline = variants.index("naive") if "naive" in variants else 0
    baseline_ms = measured[baseline][1].median_ms
    dense_core = analytic_core_flops("naive", n, d, batch=settings.batch)

    reports = []
    for index, (case, (counter, timing)) in enumerate(zip(cases, measured)):
        w, r = case.segment
        analytic = analytic_attention_flops(case.variant, n, d, w, settings.batch)
        core = analytic_core_flops(case.variant, n, d, w, settings.batch)
        if counter.flops != analytic:
            logger.warning("%s: measured %d flops, model predicts %d", case.variant, counter.flops, analytic)
        speedup = 1.0 if index == baseline else baseline_ms / max(timing.median_ms, 1e-9)
        reports.append(CostReport(
            variant=case.variant, N=n, d=d, h=h, w=w, r=r,
            tile_rows=case.attention.tile_rows, tile_cols=case.attention.tile_cols, batch=settings.batch,
            seed=settings.seed, sparse=case.sparse, flash=case.flash,
            analytic_flops=analytic, measured_flops=counter.flops, core_flops=counter.tag_flops(TAG_ATTENTION_CORE),
            peak_bytes=counter.peak_transient_bytes,
            time_ms_median=timing.median_ms, time_ms_iqr=timing.iqr_ms,
            repetitions=timing.repetitions, warmups=timing.warmups,
            speedup=speedup, flops_speedup=dense_core / core,
        ))
    return reports


# --- Report I/O ---
def reports_frame(reports: Sequence[CostReport]) -> pd.DataFrame:
    return pd.DataFrame([report.model_dump() for report in reports], columns=list(CostReport.model_fields))


def write_reports(reports: Sequence[CostReport], out_dir: Path) -> tuple[Path, Path]:
    """Writes reports.csv and reports.jsonl under `out_dir`."""
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, jsonl_path = out_dir / REPORTS_CSV, out_dir / REPORTS_JSONL
    reports_frame(reports).to_csv(csv_path, index=False)
    jsonl_path.write_text("".join(report.model_dump_json() + "\n" for report in reports), encoding="utf-8")
    logger.info("Wrote %d cost reports to %s", len(reports), out_dir)
    return csv_path, jsonl_path


def read_reports_csv(path: Path) -> list[CostReport]:
    frame = pd.read_csv(path, float_precision="round_trip")
    return [CostReport(**row) for row in frame.to_dict(orient="records")]


def read_reports_jsonl(path: Path) -> list[CostReport]:
    return [CostReport(**json.loads(line)) for line in path.read_text(encoding="utf-8").splitlines() if line]


def format_reports(reports: Sequence[CostReport]) -> str:
    columns = ["variant", "N", "d", "h", "w", "r", "analytic_flops", "measured_flops", "peak_bytes",
               "time_ms_median", "time_ms_iqr", "speedup", "flops_speedup"]
    return tabulate(reports_frame(reports)[columns], headers="keys", tablefmt="github", showindex=False, floatfmt=".4f")
