import numpy as np
import pytest

from src.engine import gradcheck as gradcheck_module
from src.engine.attention import AttentionConfig, init_attention_weights, naive_mhsa
from src.engine.errors import RejectedInputError
from src.engine.gradcheck import (
    GradCase,
    gradcheck,
    registered_ops,
    relative_error,
    run_gradchecks,
    toy_encoder_pair,
)
from src.engine.tensor_core import Rng, Tape, Tensor, backward, emit_op, mul, sum_all


def test_registry_covers_primitives_attention_and_losses():
    ops = registered_ops()
    assert len(ops) >= 8
    for name in ("matmul", "softmax_lastdim", "layernorm", "gelu", "flash_attention",
                 "sparse_flash_mhsa", "logit_loss", "layerwise_loss"):
        assert name in ops


def test_relative_error_handles_zero_vectors():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 1.0


def test_every_registered_op_passes_default_threshold():
    results = run_gradchecks()
    failing = {r.name: r.metric for r in results if not r.passed}
    assert failing == {}
    assert [r.name for r in results] == registered_ops()
    assert all(r.cases >= 1 for r in results)


def test_tiny_threshold_reports_failures():
    results = run_gradchecks(threshold=1e-9, ops=["matmul", "layernorm"])
    assert any(not r.passed for r in results)
    assert all(r.threshold == 1e-9 for r in results)


def test_wrong_backward_rule_is_detected():
    def doubled(x):
        return emit_op("doubled", x.data * 2.0, (x,), lambda grad: (grad * 3.0,))

    case = GradCase(
        label="3x4",
        values={"x": Rng(0).normal((3, 4), 1.0, np.float64)},
        checked=("x",),
        fn=lambda t: sum_all(doubled(t["x"])),
    )
    assert gradcheck(case, Rng(1)) == pytest.approx(1.0 / 3.0)


def test_unknown_op_is_rejected():
    with pytest.raises(RejectedInputError):
        run_gradchecks(ops=["conv3d"])


def test_non_positive_threshold_is_rejected():
    with pytest.raises(RejectedInputError):
        run_gradchecks(threshold=0.0, ops=["matmul"])


def test_runs_are_seeded():
    first = run_gradchecks(seed=3, ops=["softmax_lastdim", "put_rows"])
    second = run_gradchecks(seed=3, ops=["softmax_lastdim", "put_rows"])
    assert [r.metric for r in first] == [r.metric for r in second]


def test_toy_encoder_pair_halves_depth():
    teacher, student = toy_encoder_pair()
    assert teacher.num_layers == 2 * student.num_layers
    assert student.attention_variant == "sparse_flash"
    assert teacher.num_tokens == student.num_tokens


def test_attention_ops_pass_with_shift_invariant_key_bias():
    results = run_gradchecks(ops=["naive_mhsa", "flash_mhsa", "sparse_mhsa", "sparse_flash_mhsa"])
    assert [(r.name, r.passed) for r in results] == [
        ("naive_mhsa", True), ("flash_mhsa", True), ("sparse_mhsa", True), ("sparse_flash_mhsa", True)
    ]


def test_key_bias_gradient_vanishes():
    rng = Rng(4)
    cfg = AttentionConfig(embed_dim=8, num_heads=2, segment_size=2, dilation_interval=2)
    wts = init_attention_weights(8, rng, std=0.5, requires_grad=True)
    x = Tensor(rng.normal((8, 8)))
    weights = Tensor(rng.normal((8, 8)))
    with Tape() as tape:
        loss = sum_all(mul(naive_mhsa(x, wts, cfg), weights))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[wts.bk.uid].data, 0.0, atol=1e-4)
    assert np.abs(grads[wts.bq.uid].data).max() > 1e-3


def test_op_that_raises_is_reported_as_failure(monkeypatch):
    def broken(rng):
        raise RejectedInputError("shapes differ")

    monkeypatch.setitem(gradcheck_module.OP_REGISTRY, "gelu", broken)
    results = run_gradchecks(ops=["gelu", "matmul"])
    assert [(r.name, r.passed) for r in results] == [("gelu", False), ("matmul", True)]
    assert results[0].cases == 0
    assert "shapes differ" in results[0].detail
