import time
from fractions import Fraction

import pytest

from src.engine.bench import (
    MEMORY_METRIC,
    BenchSettings,
    ablation_cases,
    analytic_core_flops,
    analytic_flops,
    compare_variants,
    encoder_flops,
    format_reports,
    make_case,
    measure,
    read_reports_csv,
    read_reports_jsonl,
    write_reports,
)
from src.engine.encoder3d import encode, init_encoder_params, make_student_config, make_teacher_config
from src.engine.errors import RejectedInputError
from src.engine.tensor_core import Rng, Tensor, count_ops


@pytest.fixture(scope="module")
def small_reports():
    cases = [make_case("naive", 64, 16, 4), make_case("sparse_flash", 64, 16, 4, tiles=4)]
    return compare_variants(cases)


# --- Analytic model ---
def test_single_token_dense_core_costs_four_d():
    assert analytic_core_flops("naive", 1, 16) == 4 * 16


def test_sparse_core_ratio_is_w_over_n():
    ratio = Fraction(analytic_core_flops("sparse_flash", 512, 64, 64), analytic_core_flops("naive", 512, 64))
    assert ratio == Fraction(1, 8)


def test_ffn_only_prefix_drops_attention_terms():
    dense = analytic_flops("naive", 64, 16, 4, 64, 1, 4, layers=6, ffn_only_prefix=0)
    prefixed = analytic_flops("naive", 64, 16, 4, 64, 1, 4, layers=6, ffn_only_prefix=2)
    attention_per_block = 8 * 64 * 16 * 16 + 4 * 64 * 64 * 16
    assert dense - prefixed == 2 * attention_per_block


@pytest.mark.parametrize("make_config", [make_teacher_config, make_student_config])
def test_encoder_counter_matches_cost_model(make_config):
    cfg = make_config("toy")
    params = init_encoder_params(cfg, Rng(0))
    with count_ops() as counter:
        encode(Tensor(Rng(1).normal((32, 32, 32))), cfg, params)
    assert counter.flops == encoder_flops(cfg)


def test_cost_model_rejects_bad_configurations():
    with pytest.raises(RejectedInputError):
        analytic_core_flops("sparse", 64, 16)
    with pytest.raises(RejectedInputError):
        analytic_flops("sparse", 60, 16, 4, 16, 1, 4, layers=2, ffn_only_prefix=0)
    with pytest.raises(RejectedInputError):
        analytic_core_flops("dilated", 64, 16)


# --- measure ---
def test_noop_runner_is_fast():
    stats = measure(lambda: None)
    assert stats.median_ms <= 1.0
    assert len(stats.samples_ms) == 11
    assert stats.warmups == 3


def test_sleep_runner_median_tracks_sleep():
    stats = measure(lambda: time.sleep(0.02), repetitions=11, warmups=1)
    assert 20.0 <= stats.median_ms <= 30.0


def test_single_repetition_has_zero_spread():
    assert measure(lambda: None, repetitions=1, warmups=0).iqr_ms == 0.0


def test_measure_rejects_zero_repetitions():
    with pytest.raises(RejectedInputError):
        measure(lambda: None, repetitions=0)


def test_bench_settings_enforce_minimum_runs():
    with pytest.raises(ValueError):
        BenchSettings(repetitions=5)
    with pytest.raises(ValueError):
        BenchSettings(warmups=1)


def test_bench_settings_are_frozen():
    settings = BenchSettings(seed=3)
    with pytest.raises(ValueError):
        settings.seed = 4


def test_reports_record_the_input_seed(small_reports):
    assert {report.seed for report in small_reports} == {0}


# --- compare_variants ---
def test_baseline_speedup_is_one(small_reports):
    naive, sparse = small_reports
    assert naive.speedup == 1.0
    assert naive.flops_speedup == 1.0
    assert (naive.w, naive.r) == (64, 1)
    assert sparse.speedup > 0


def test_sparse_flops_speedup_is_n_over_w(small_reports):
    sparse = small_reports[1]
    assert sparse.w == 8
    assert sparse.flops_speedup == 8.0
    assert sparse.core_flops == 4 * 64 * 8 * 16


def test_measured_flops_match_cost_model(small_reports):
    assert all(report.flops_match for report in small_reports)
    assert all(report.memory_metric == MEMORY_METRIC for report in small_reports)


def test_single_variant_is_its_own_baseline():
    (report,) = compare_variants([make_case("flash", 32, 16, 4, tiles=8)])
    assert report.speedup == 1.0
    assert report.flash and not report.sparse


def test_cases_must_share_shape():
    with pytest.raises(RejectedInputError):
        compare_variants([make_case("naive", 64, 16, 4), make_case("naive", 128, 16, 4)])


def test_indivisible_segment_is_rejected():
    with pytest.raises(RejectedInputError):
        make_case("sparse_flash", 64, 16, 4, w=7)


def test_ablation_grid_covers_both_toggles():
    cases = ablation_cases(64, 16, 4, w=16, r=2)
    assert {(case.sparse, case.flash) for case in cases} == {
        (False, False), (False, True), (True, False), (True, True)
    }


def test_batched_reports_scale_flops():
    (report,) = compare_variants([make_case("sparse", 32, 16, 4)], BenchSettings(batch=2))
    assert report.batch == 2
    assert report.measured_flops == report.analytic_flops == 2 * (8 * 32 * 16 * 16 + 4 * 32 * 4 * 16)


# --- Report files ---
def test_reports_round_trip_through_csv_and_jsonl(tmp_path, small_reports):
    csv_path, jsonl_path = write_reports(small_reports, tmp_path)
    assert read_reports_csv(csv_path) == small_reports
    assert read_reports_jsonl(jsonl_path) == small_reports


def test_console_table_lists_variants(small_reports):
    table = format_reports(small_reports)
    assert "variant" in table.splitlines()[0]
    assert "sparse_flash" in table


@pytest.mark.slow
def test_sparse_flash_beats_dense_at_4096_tokens():
    reports = compare_variants([make_case("naive", 4096, 64, 4), make_case("sparse_flash", 4096, 64, 4)])
    naive, sparse = reports
    assert sparse.speedup > 1.0
    assert sparse.peak_bytes < naive.peak_bytes
