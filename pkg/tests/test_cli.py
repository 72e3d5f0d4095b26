import json
from unittest.mock import patch

import pytest

from src.cli.main import EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, main
from src.engine.bench import CostReport, read_reports_csv, read_reports_jsonl
from src.engine.checks import read_check_report
from src.engine.distill import TrainHistory
from tests.conftest import tiny_configs


@pytest.fixture
def tiny_encoders():
    """Swaps the toy presets for the tiny pair so distill runs take a fraction of a second per step."""
    teacher, student = tiny_configs()
    with patch("src.cli.main.make_teacher_config", return_value=teacher), \
            patch("src.cli.main.make_student_config", return_value=student):
        yield teacher, student


# --- verify ---
def test_verify_passes_and_writes_manifest(tmp_path):
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_OK
    results = read_check_report(tmp_path / "verify.json")
    assert all(r.passed for r in results)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "verify"
    assert manifest["seed"] == 42
    assert manifest["files"] == ["verify.json"]
    assert manifest["resolved"]["inject_fault"] is None
    assert "flash_oracle_equivalence" in manifest["resolved"]["suites"]
    assert json.loads((tmp_path / "verify.json").read_text())["seed"] == 42


def test_verify_with_fault_fails_and_names_check(tmp_path, capsys):
    code = main(["verify", "--inject-fault", "flash_sign_flip", "--out", str(tmp_path)])
    assert code == EXIT_CHECK_FAILED
    assert "flash_oracle_equivalence" in capsys.readouterr().err


def test_verify_reruns_are_byte_identical(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["verify", "--seed", "7", "--out", str(first)]) == EXIT_OK
    assert main(["verify", "--seed", "7", "--out", str(second)]) == EXIT_OK
    for name in ("verify.json", "manifest.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


# --- gradcheck ---
def test_gradcheck_default_threshold_passes(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_OK
    assert len(read_check_report(tmp_path / "gradcheck.json")) >= 8
    assert json.loads((tmp_path / "gradcheck.json").read_text())["seed"] == 42
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["resolved"]["threshold"] == 1e-3
    assert len(manifest["resolved"]["ops"]) >= 8


def test_gradcheck_tiny_threshold_fails(tmp_path):
    code = main(["gradcheck", "--threshold", "1e-9", "--op", "matmul", "--op", "gelu", "--out", str(tmp_path)])
    assert code == EXIT_CHECK_FAILED
    assert [r.name for r in read_check_report(tmp_path / "gradcheck.json")] == ["matmul", "gelu"]


# --- bench ---
def test_bench_small_sweep_writes_reports(tmp_path):
    code = main(["bench", "--sweep", "64,128", "--d", "16", "--heads", "4", "--tiles", "8", "--out", str(tmp_path)])
    assert code == EXIT_OK
    reports = read_reports_csv(tmp_path / "reports.csv")
    assert [(r.variant, r.N) for r in reports] == [
        ("naive", 64), ("sparse_flash", 64), ("naive", 128), ("sparse_flash", 128)
    ]
    assert all(r.flops_match for r in reports)
    assert [r.flops_speedup for r in reports if r.sparse] == [8.0, 8.0]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["files"] == ["reports.csv", "reports.jsonl"]
    assert {r.seed for r in reports} == {42}
    assert manifest["resolved"]["settings"]["seed"] == 42
    assert [case["attention"]["segment_size"] for case in manifest["resolved"]["cases"]] == [8, 8, 16, 16]


def test_bench_single_variant_reports_unit_speedup(tmp_path):
    code = main(["bench", "--sweep", "32", "--d", "16", "--heads", "4", "--variant", "flash", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert [r.speedup for r in read_reports_csv(tmp_path / "reports.csv")] == [1.0]


_TIMING_FIELDS = {"time_ms_median", "time_ms_iqr", "speedup"}


def test_bench_reruns_agree_outside_timing_fields(tmp_path):
    argv = ["bench", "--sweep", "32,64", "--d", "16", "--heads", "4", "--tiles", "8", "--seed", "5"]
    assert main([*argv, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([*argv, "--out", str(tmp_path / "b")]) == EXIT_OK
    fields = [name for name in CostReport.model_fields if name not in _TIMING_FIELDS]
    for reader, name in ((read_reports_csv, "reports.csv"), (read_reports_jsonl, "reports.jsonl")):
        first, second = reader(tmp_path / "a" / name), reader(tmp_path / "b" / name)
        assert [r.model_dump(include=set(fields)) for r in first] == [r.model_dump(include=set(fields)) for r in second]
        assert {r.seed for r in first} == {5}
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["bench", "--sweep", "abc"],
        ["bench", "--sweep", "64", "--d", "16", "--heads", "4", "--w", "7"],
        ["bench", "--sweep", "64", "--d", "16", "--heads", "4", "--repetitions", "3"],
        ["bench", "--variant", "dilated"],
        ["frobnicate"],
        ["distill", "--iterations", "3"],
    ],
)
def test_bad_arguments_exit_with_usage_error(tmp_path, argv):
    assert main([*argv, "--out", str(tmp_path)]) == EXIT_USAGE


# --- distill ---
def test_distill_writes_history_checkpoints_and_manifest(tmp_path, tiny_encoders):
    code = main(["distill", "--iterations", "12", "--logit-iterations", "2", "--batch", "1", "--out", str(tmp_path)])
    assert code == EXIT_OK
    history = TrainHistory.from_jsonl((tmp_path / "history.jsonl").read_text())
    assert history.k_trace() == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6]
    assert len(history.losses("logit")) == 2
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["teacher_checksum_before"] == summary["teacher_checksum_after"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["files"] == sorted(
        ["history.jsonl", "timing.jsonl", "student.ckpt", "summary.json", "teacher.ckpt"]
    )
    assert manifest["overrides"]["iterations"] == 12
    assert manifest["resolved"]["train"]["total_iterations"] == 12
    assert manifest["resolved"]["student"]["attention_variant"] == "sparse_flash"
    assert manifest["resolved"]["student"]["segment_size"] == 4
    assert manifest["resolved"]["teacher"]["num_layers"] == 12
    assert summary["seed"] == 42
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert {json.loads(line)["seed"] for line in lines} == {42}


def test_distill_history_is_reproducible(tmp_path, tiny_encoders):
    argv = ["distill", "--iterations", "6", "--logit-iterations", "1", "--batch", "1", "--seed", "3"]
    assert main([*argv, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([*argv, "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("history.jsonl", "summary.json", "student.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_distill_reuses_teacher_checkpoint(tmp_path, tiny_encoders):
    argv = ["distill", "--iterations", "6", "--logit-iterations", "0", "--batch", "1"]
    assert main([*argv, "--out", str(tmp_path / "first")]) == EXIT_OK
    teacher = tmp_path / "first" / "teacher.ckpt"
    assert main([*argv, "--teacher-checkpoint", str(teacher), "--out", str(tmp_path / "second")]) == EXIT_OK
    assert not (tmp_path / "second" / "teacher.ckpt").exists()


def test_distill_missing_teacher_checkpoint_is_usage_error(tmp_path, tiny_encoders):
    code = main(["distill", "--teacher-checkpoint", str(tmp_path / "absent.ckpt"), "--out", str(tmp_path)])
    assert code == EXIT_USAGE


# --- settings ---
@pytest.mark.parametrize(
    ("env", "value"),
    [("SPARSEFLASH_WORKERS", "many"), ("SPARSEFLASH_WORKERS", "0"), ("SPARSEFLASH_LOG_LEVEL", "loud")],
)
def test_bad_environment_settings_exit_with_usage_error(tmp_path, monkeypatch, env, value):
    monkeypatch.setenv(env, value)
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_USAGE


def test_unknown_log_level_flag_is_usage_error(tmp_path):
    assert main(["--log-level", "chatty", "verify", "--out", str(tmp_path)]) == EXIT_USAGE
