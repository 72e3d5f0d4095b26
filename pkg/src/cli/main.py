"""
`sparseflash` command line: verify, gradcheck, bench and distill subcommands.

Every run writes its artifacts plus a `manifest.json` (command, scale, seed,
overrides, resolved config, produced files) under --out. Exit status is 0
when every check passes, 1 when a check fails and 2 for usage or input errors.
"""
import argparse
import json
import logging
import sys
from collections.abc import Callable, Mapping, Sequence
from contextlib import AbstractContextManager, nullcontext
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field
from tabulate import tabulate

from src.engine.attention import ATTENTION_VARIANTS, FAULT_FLASH_SIGN_FLIP, inject_fault
from src.engine.bench import (
    BenchSettings,
    CostReport,
    ablation_cases,
    compare_variants,
    format_reports,
    make_case,
    write_reports,
)
from src.engine.checkpoint import load_checkpoint, params_checksum, save_checkpoint
from src.engine.checks import CheckResult, failed_names, write_check_report
from src.engine.distill import (
    DistillConfig,
    distill_train,
    init_layer_projections,
    synthetic_volumes,
)
from src.engine.encoder3d import check_params, init_encoder_params, make_student_config, make_teacher_config
from src.engine.errors import CheckpointError, NonFiniteLossError
from src.engine.gradcheck import DEFAULT_STEP, DEFAULT_THRESHOLD, registered_ops, run_gradchecks
from src.engine.settings import get_settings
from src.engine.tensor_core import Rng
from src.engine.verify import SUITES, run_verify

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

Command = Literal["verify", "gradcheck", "bench", "distill"]
_SCALE_LABELS = {"toy": "toy", "paper-shape": "paper"}
_BENCH_SHAPES = {"toy": {"sweep": "256,1024,4096", "d": 64, "heads": 4}, "paper-shape": {"sweep": "512", "d": 768, "heads": 12}}


# --- Run Configuration ---
class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    command: Command
    scale: Literal["toy", "paper-shape"] = "toy"
    seed: int = 42
    out: Path
    overrides: dict[str, object] = Field(default_factory=dict)

    @property
    def encoder_scale(self) -> str:
        return _SCALE_LABELS[self.scale]


def _run_config(args: argparse.Namespace, keys: Sequence[str]) -> RunConfig:
    overrides = {key: getattr(args, key) for key in keys if getattr(args, key) is not None}
    out = args.out if args.out is not None else Path("runs") / args.command
    return RunConfig(command=args.command, scale=args.scale, seed=args.seed, out=out, overrides=overrides)


def write_manifest(config: RunConfig, files: Sequence[str], resolved: Mapping[str, object]) -> Path:
    """Names seed, overrides, resolved config and artifacts; nothing run-specific, so reruns are byte-identical."""
    payload = {
        "command": config.command,
        "scale": config.scale,
        "seed": config.seed,
        "resolved": resolved,
        "overrides": {key: str(value) if isinstance(value, Path) else value for key, value in config.overrides.items()},
        "files": sorted(files),
    }
    path = config.out / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _print_checks(results: Sequence[CheckResult]) -> None:
    rows = [(r.name, r.status, f"{r.metric:.3e}", f"{r.threshold:.0e}", r.cases, r.detail) for r in results]
    print(tabulate(rows, headers=["check", "status", "metric", "threshold", "cases", "detail"], tablefmt="github"))


def _finish_checks(
    config: RunConfig, results: Sequence[CheckResult], report_name: str, resolved: Mapping[str, object]
) -> int:
    write_check_report(results, config.out / report_name, config.seed)
    write_manifest(config, [report_name], resolved)
    _print_checks(results)
    failed = failed_names(results)
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# --- Commands ---
def cmd_verify(args: argparse.Namespace) -> int:
    config = _run_config(args, ["inject_fault"])
    fault: AbstractContextManager[None] = inject_fault(args.inject_fault) if args.inject_fault else nullcontext()
    logger.info("Running verification suites (seed %d)...", config.seed)
    with fault:
        results = run_verify(config.seed)
    return _finish_checks(config, results, "verify.json", {"inject_fault": args.inject_fault, "suites": list(SUITES)})


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = _run_config(args, ["threshold", "op"])
    logger.info("Running gradient checks at threshold %.0e...", args.threshold)
    results = run_gradchecks(threshold=args.threshold, seed=config.seed, ops=args.op)
    resolved = {"threshold": args.threshold, "step": DEFAULT_STEP, "ops": args.op or registered_ops()}
    return _finish_checks(config, results, "gradcheck.json", resolved)


def _parse_sweep(spec: str) -> list[int]:
    try:
        tokens = [int(part) for part in spec.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"invalid sweep {spec!r}; expected comma-separated token counts") from None
    if not tokens or min(tokens) < 1:
        raise ValueError(f"invalid sweep {spec!r}; token counts must be positive")
    return tokens


def cmd_bench(args: argparse.Namespace) -> int:
    config = _run_config(args, ["sweep", "variant", "d", "heads", "w", "r", "tiles", "batch", "repetitions",
                                "warmups", "ablation"])
    shape = _BENCH_SHAPES[config.scale]
    tokens = _parse_sweep(args.sweep or str(shape["sweep"]))
    d = args.d or int(shape["d"])
    heads = args.heads or int(shape["heads"])
    variants = args.variant or ["naive", "sparse_flash"]
    settings = BenchSettings(repetitions=args.repetitions, warmups=args.warmups, batch=args.batch, seed=config.seed)

    reports: list[CostReport] = []
    resolved_cases: list[dict[str, object]] = []
    for n in tokens:
        if args.ablation:
            cases = ablation_cases(n, d, heads, args.w, args.r, args.tiles)
        else:
            cases = [make_case(variant, n, d, heads, args.w, args.r, args.tiles) for variant in variants]
        logger.info("Benchmarking N=%d: %s", n, ", ".join(case.variant for case in cases))
        resolved_cases.extend(case.model_dump(mode="json") for case in cases)
        reports.extend(compare_variants(cases, settings))

    csv_path, jsonl_path = write_reports(reports, config.out)
    resolved = {"settings": settings.model_dump(mode="json"), "cases": resolved_cases}
    write_manifest(config, [csv_path.name, jsonl_path.name], resolved)
    print(format_reports(reports))

    mismatched = [f"{r.variant}@N={r.N}" for r in reports if not r.flops_match]
    if mismatched:
        print(f"FAILED: cost_model_agreement ({', '.join(mismatched)})", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_distill(args: argparse.Namespace) -> int:
    config = _run_config(args, ["iterations", "logit_iterations", "batch", "lr", "variant", "w", "r", "tiles",
                                "loss_norm", "schedule", "teacher_checkpoint"])
    teacher_cfg = make_teacher_config(config.encoder_scale)
    student_cfg = make_student_config(config.encoder_scale).with_overrides(
        attention_variant=args.variant, segment_size=args.w, dilation_interval=args.r,
        tile_rows=args.tiles, tile_cols=args.tiles,
    )
    train_cfg = DistillConfig(
        total_iterations=args.iterations, logit_phase_iterations=args.logit_iterations, batch_size=args.batch,
        learning_rate=args.lr, seed=config.seed, loss_norm=args.loss_norm, schedule=args.schedule,
    )

    rng = Rng(config.seed)
    teacher_rng, student_rng, projection_rng, data_rng = (rng.child() for _ in range(4))
    files = ["history.jsonl", "timing.jsonl", "student.ckpt", "summary.json"]
    if args.teacher_checkpoint is not None:
        teacher_params = load_checkpoint(args.teacher_checkpoint)
        check_params(teacher_cfg, teacher_params)
    else:
        logger.info("Building seeded teacher encoder (%d layers)...", teacher_cfg.num_layers)
        teacher_params = init_encoder_params(teacher_cfg, teacher_rng)
        save_checkpoint(config.out / "teacher.ckpt", teacher_params)
        files.append("teacher.ckpt")
    student_params = init_encoder_params(student_cfg, student_rng)
    projections = init_layer_projections(student_cfg, teacher_cfg, projection_rng)
    data = synthetic_volumes(student_cfg.input_extent, train_cfg.batch_size, data_rng)

    try:
        result = distill_train(teacher_cfg, teacher_params, student_cfg, student_params, data, train_cfg, projections)
    except NonFiniteLossError as e:
        logger.error("Distillation aborted: %s", e)
        return EXIT_CHECK_FAILED

    out = config.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.jsonl").write_text(result.history.to_history_jsonl(), encoding="utf-8")
    (out / "timing.jsonl").write_text(result.history.to_timing_jsonl(), encoding="utf-8")
    save_checkpoint(out / "student.ckpt", {**result.student_params, **result.projections})
    layerwise = result.history.losses("layerwise")
    summary = {
        "seed": config.seed,
        "k_trace": result.history.k_trace(),
        "first_layerwise_loss": layerwise[0] if layerwise else None,
        "final_layerwise_loss": layerwise[-1] if layerwise else None,
        "final_logit_loss": (result.history.losses("logit") or [None])[-1],
        "teacher_checksum_before": result.teacher_checksum_before,
        "teacher_checksum_after": result.teacher_checksum_after,
        "student_checksum": params_checksum(result.student_params),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    resolved = {
        "teacher": teacher_cfg.model_dump(mode="json"),
        "student": student_cfg.model_dump(mode="json"),
        "train": train_cfg.model_dump(mode="json"),
    }
    write_manifest(config, files, resolved)

    shown = [(key, value) for key, value in summary.items() if key not in ("seed", "k_trace")]
    print(tabulate(shown, tablefmt="github"))
    if result.teacher_checksum_before != result.teacher_checksum_after:
        print("FAILED: teacher_unchanged", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "verify": cmd_verify,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "distill": cmd_distill,
}


# --- Argument Parsing ---
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--scale", choices=list(_SCALE_LABELS), default="toy")
    common.add_argument("--out", type=Path, default=None, help="output directory (default runs/<command>)")

    parser = argparse.ArgumentParser(prog="sparseflash", description=__doc__.splitlines()[1] if __doc__ else None)
    parser.add_argument("--log-level", default=None, help="overrides SPARSEFLASH_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", parents=[common], help="attention equivalence suites")
    verify.add_argument("--inject-fault", choices=[FAULT_FLASH_SIGN_FLIP], default=None)

    grad = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    grad.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    grad.add_argument("--op", action="append", choices=registered_ops(), default=None)

    bench = sub.add_parser("bench", parents=[common], help="flops, memory and wall-time reports")
    bench.add_argument("--sweep", default=None, help="comma-separated token counts")
    bench.add_argument("--variant", action="append", choices=list(ATTENTION_VARIANTS), default=None)
    bench.add_argument("--d", type=int, default=None)
    bench.add_argument("--heads", type=int, default=None)
    bench.add_argument("--w", type=int, default=None, help="segment size (default N/8)")
    bench.add_argument("--r", type=int, default=1)
    bench.add_argument("--tiles", type=int, default=16)
    bench.add_argument("--batch", type=int, default=1)
    bench.add_argument("--repetitions", type=int, default=11)
    bench.add_argument("--warmups", type=int, default=3)
    bench.add_argument("--ablation", action="store_true", help="run the sparse x flash grid")

    distill = sub.add_parser("distill", parents=[common], help="layer-wise progressive distillation")
    distill.add_argument("--iterations", type=int, default=36)
    distill.add_argument("--logit-iterations", type=int, default=12)
    distill.add_argument("--batch", type=int, default=16)
    distill.add_argument("--lr", type=float, default=5e-3)
    distill.add_argument("--variant", choices=list(ATTENTION_VARIANTS), default=None)
    distill.add_argument("--w", type=int, default=None)
    distill.add_argument("--r", type=int, default=None)
    distill.add_argument("--tiles", type=int, default=None)
    distill.add_argument("--loss-norm", choices=["plain_l2", "rms"], default="plain_l2")
    distill.add_argument("--schedule", choices=["progressive", "logit_only"], default="progressive")
    distill.add_argument("--teacher-checkpoint", type=Path, default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    try:
        level = (args.log_level or get_settings().log_level).upper()
        if level not in logging.getLevelNamesMapping():
            raise ValueError(f"unknown log level {level!r}")
        logging.basicConfig(
            level=level,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        return COMMANDS[args.command](args)
    except (ValueError, CheckpointError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
