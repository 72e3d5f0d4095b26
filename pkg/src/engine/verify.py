"""
Equivalence suites for the attention operators and their plumbing.

Each suite returns one `CheckResult`; `run_verify` runs them all with case
seeds derived from one base seed.
"""
import logging
import math
from collections.abc import Callable

import numpy as np

from .attention import (
    AttentionConfig,
    AttentionWeights,
    SegmentPlan,
    build_segment_plan,
    flash_mhsa,
    gather_segments,
    init_attention_weights,
    naive_mhsa,
    scatter_segments,
    sparse_flash_mhsa,
    sparse_mhsa,
)
from .checkpoint import decode_checkpoint, encode_checkpoint
from .checks import CheckResult
from .encoder3d import init_encoder_params, make_student_config
from .tensor_core import Rng, Tensor

logger = logging.getLogger(__name__)

ORACLE_TOKENS = (16, 64, 256)
ORACLE_WIDTHS = (16, 64)
ORACLE_HEADS = 4
SEEDS_PER_CASE = 3
PARTITION_TRIALS = 200


def _max_abs(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> float:
    left = a.data if isinstance(a, Tensor) else a
    right = b.data if isinstance(b, Tensor) else b
    return float(np.max(np.abs(left.astype(np.float64) - right.astype(np.float64))))


def _inputs(rng: Rng, n: int, d: int) -> tuple[Tensor, AttentionWeights]:
    x = Tensor(rng.normal((n, d)))
    return x, init_attention_weights(d, rng, std=1.0 / math.sqrt(d))


def _result(name: str, worst: float, threshold: float, cases: int, detail: str = "") -> CheckResult:
    passed = worst <= threshold
    logger.log(logging.INFO if passed else logging.WARNING, "%s: max abs diff %.3e (threshold %.0e)",
               name, worst, threshold)
    return CheckResult(name=name, passed=passed, metric=worst, threshold=threshold, cases=cases, detail=detail)


# --- Suites ---
def check_flash_oracle(rng: Rng, threshold: float = 1e-5) -> CheckResult:
    """flash_mhsa against naive_mhsa over the N x d grid, three seeds each."""
    worst, worst_case, cases = 0.0, "", 0
    for n in ORACLE_TOKENS:
        for d in ORACLE_WIDTHS:
            cfg = AttentionConfig(embed_dim=d, num_heads=ORACLE_HEADS)
            for _ in range(SEEDS_PER_CASE):
                x, wts = _inputs(rng.child(), n, d)
                diff = _max_abs(flash_mhsa(x, wts, cfg), naive_mhsa(x, wts, cfg))
                cases += 1
                if diff >= worst:
                    worst, worst_case = diff, f"N={n}, d={d}"
    return _result("flash_oracle_equivalence", worst, threshold, cases, worst_case)


def check_flash_single_tile(rng: Rng, threshold: float = 1e-6) -> CheckResult:
    worst = 0.0
    for n in (16, 64):
        cfg = AttentionConfig(embed_dim=16, num_heads=ORACLE_HEADS, tile_rows=n, tile_cols=n)
        x, wts = _inputs(rng.child(), n, 16)
        worst = max(worst, _max_abs(flash_mhsa(x, wts, cfg), naive_mhsa(x, wts, cfg)))
    return _result("flash_single_tile", worst, threshold, 2)


def check_dense_limit(rng: Rng, threshold: float = 1e-6) -> CheckResult:
    """sparse_flash with one segment spanning every token (w=N, r=1) reduces to flash."""
    worst, cases = 0.0, 0
    for n in ORACLE_TOKENS:
        for d in ORACLE_WIDTHS:
            dense = AttentionConfig(embed_dim=d, num_heads=ORACLE_HEADS)
            limit = AttentionConfig(embed_dim=d, num_heads=ORACLE_HEADS, segment_size=n, dilation_interval=1)
            x, wts = _inputs(rng.child(), n, d)
            worst = max(worst, _max_abs(sparse_flash_mhsa(x, wts, limit), flash_mhsa(x, wts, dense)))
            cases += 1
    return _result("sparse_dense_limit", worst, threshold, cases)


def _random_triple(rng: Rng) -> tuple[int, int, int]:
    w = int(rng.integers(1, 17))
    r = int(rng.integers(1, 5))
    return w * r * int(rng.integers(1, 9)), w, r


def check_partition(rng: Rng, trials: int = PARTITION_TRIALS) -> CheckResult:
    """Random valid (N, w, r) plans must be disjoint, complete and stride-r."""
    violations: list[str] = []
    for _ in range(trials):
        n, w, r = _random_triple(rng)
        plan = build_segment_plan(n, w, r)
        try:
            plan.check()
        except ValueError as e:
            violations.append(f"(N={n}, w={w}, r={r}): {e}")
    return CheckResult(
        name="segment_partition",
        passed=not violations,
        metric=float(len(violations)),
        threshold=0.0,
        cases=trials,
        detail="; ".join(violations[:3]),
    )


def segmentwise_naive_oracle(x: np.ndarray, wts: AttentionWeights, cfg: AttentionConfig, plan: SegmentPlan) -> np.ndarray:
    """Float64 straight-line evaluation: project, attend inside each segment per head, scatter, project out."""
    def bias(t: Tensor | None) -> np.ndarray:
        return np.zeros(cfg.embed_dim) if t is None else t.data.astype(np.float64)

    x64 = x.astype(np.float64)
    q = x64 @ wts.wq.data.astype(np.float64) + bias(wts.bq)
    k = x64 @ wts.wk.data.astype(np.float64) + bias(wts.bk)
    v = x64 @ wts.wv.data.astype(np.float64) + bias(wts.bv)
    dh = cfg.head_dim
    attended = np.zeros_like(q)
    for segment in plan.segments:
        rows = list(segment)
        for head in range(cfg.num_heads):
            cols = slice(head * dh, (head + 1) * dh)
            scores = q[rows, cols] @ k[rows, cols].T / math.sqrt(dh)
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            attended[rows, cols] = probs @ v[rows, cols]
    return attended @ wts.wo.data.astype(np.float64) + bias(wts.bo)


def check_sparse_segment_oracle(rng: Rng, threshold: float = 1e-5) -> CheckResult:
    """sparse_flash_mhsa against the per-segment float64 oracle at N=16, w=4, r=2."""
    cfg = AttentionConfig(embed_dim=8, num_heads=2, segment_size=4, dilation_interval=2, tile_rows=2, tile_cols=2)
    plan = build_segment_plan(16, 4, 2)
    worst = 0.0
    for _ in range(SEEDS_PER_CASE):
        x, wts = _inputs(rng.child(), 16, 8)
        oracle = segmentwise_naive_oracle(x.data, wts, cfg, plan)
        worst = max(worst, _max_abs(sparse_flash_mhsa(x, wts, cfg), oracle))
    return _result("sparse_segment_oracle", worst, threshold, SEEDS_PER_CASE)


def check_sparse_ablation(rng: Rng, threshold: float = 1e-5) -> CheckResult:
    """Naive and flash cores agree inside segments."""
    cfg = AttentionConfig(embed_dim=16, num_heads=ORACLE_HEADS, segment_size=16, dilation_interval=2)
    worst = 0.0
    for _ in range(SEEDS_PER_CASE):
        x, wts = _inputs(rng.child(), 64, 16)
        worst = max(worst, _max_abs(sparse_mhsa(x, wts, cfg), sparse_flash_mhsa(x, wts, cfg)))
    return _result("sparse_ablation_agreement", worst, threshold, SEEDS_PER_CASE)


def check_round_trip(rng: Rng) -> CheckResult:
    """Checkpoint encode/decode and segment gather/scatter must both be exact."""
    problems: list[str] = []
    params = init_encoder_params(make_student_config("toy"), rng.child())
    restored = decode_checkpoint(encode_checkpoint(params))
    if list(restored) != list(params):
        problems.append("checkpoint changed tensor names or order")
    elif any(not np.array_equal(restored[name].data, params[name].data) for name in params):
        problems.append("checkpoint changed tensor values")

    cases = 1
    for n, w, r in ((16, 4, 2), (64, 8, 4), (12, 3, 1)):
        x = Tensor(rng.normal((2, n, 5)))
        plan = build_segment_plan(n, w, r)
        if not np.array_equal(scatter_segments(gather_segments(x, plan), plan).data, x.data):
            problems.append(f"gather/scatter is not the identity for N={n}, w={w}, r={r}")
        cases += 1
    return CheckResult(
        name="round_trip",
        passed=not problems,
        metric=float(len(problems)),
        threshold=0.0,
        cases=cases,
        detail="; ".join(problems),
    )


Suite = Callable[[Rng], CheckResult]

SUITES: dict[str, Suite] = {
    "flash_oracle_equivalence": check_flash_oracle,
    "flash_single_tile": check_flash_single_tile,
    "sparse_dense_limit": check_dense_limit,
    "segment_partition": check_partition,
    "sparse_segment_oracle": check_sparse_segment_oracle,
    "sparse_ablation_agreement": check_sparse_ablation,
    "round_trip": check_round_trip,
}


def run_verify(seed: int = 0) -> list[CheckResult]:
    """Runs every suite; each suite draws from its own generator derived from `seed`."""
    parent = Rng(seed)
    results = [suite(parent.child()) for suite in SUITES.values()]
    failed = [result.name for result in results if not result.passed]
    if failed:
        logger.warning("Verification failed: %s", ", ".join(failed))
    else:
        logger.info("All %d verification suites passed.", len(results))
    return results
