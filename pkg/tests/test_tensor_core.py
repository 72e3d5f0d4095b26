import math

import numpy as np
import pytest

from src.engine.errors import RejectedInputError
from src.engine.tensor_core import (
    TAG_FFN,
    Rng,
    Tape,
    Tensor,
    backward,
    count_ops,
    gelu,
    layernorm,
    matmul,
    mean_all,
    mul,
    put_rows,
    sample_norms,
    softmax_lastdim,
    sum_all,
    take_rows,
    transient,
)
from tests.conftest import layernorm_oracle, matmul_oracle


def test_matmul_matches_triple_loop_oracle(rng):
    a = rng.normal((4, 5))
    b = rng.normal((5, 3))
    result = matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(result.data, matmul_oracle(a, b), atol=1e-5)


def test_matmul_counts_two_flops_per_multiply_add(rng):
    with count_ops() as counter:
        matmul(Tensor(rng.normal((4, 5))), Tensor(rng.normal((5, 3))))
        matmul(Tensor(rng.normal((2, 4, 5))), Tensor(rng.normal((5, 3))), tag=TAG_FFN)
    assert counter.flops == 2 * 4 * 5 * 3 * 3
    assert counter.tag_flops(TAG_FFN) == 2 * 2 * 4 * 5 * 3


def test_matmul_rejects_inner_mismatch(rng):
    with pytest.raises(RejectedInputError):
        matmul(Tensor(rng.normal((4, 5))), Tensor(rng.normal((4, 3))))


def test_tensor_rejects_empty_extent():
    with pytest.raises(RejectedInputError):
        Tensor(np.zeros((0, 3)))


def test_tensor_buffers_are_read_only(rng):
    t = Tensor(rng.normal((2, 2)))
    with pytest.raises(ValueError):
        t.data[0, 0] = 1.0


def test_softmax_of_zero_and_ln2():
    probs = softmax_lastdim(Tensor(np.array([0.0, math.log(2.0)])))
    np.testing.assert_allclose(probs.data, [1 / 3, 2 / 3], atol=1e-6)


@pytest.mark.parametrize("spread", [1.0, 80.0])
def test_softmax_rows_sum_to_one(rng, spread):
    x = rng.uniform((8, 8), -spread, spread)
    probs = softmax_lastdim(Tensor(x))
    assert np.all(probs.data >= 0)
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)


def test_layernorm_matches_oracle(rng):
    x = rng.normal((3, 16), 2.0)
    gamma = rng.normal(16)
    beta = rng.normal(16)
    result = layernorm(Tensor(x), Tensor(gamma), Tensor(beta))
    np.testing.assert_allclose(result.data, layernorm_oracle(x, gamma, beta), atol=1e-5)


def test_gelu_reference_points():
    values = gelu(Tensor(np.array([0.0, 1.0, 10.0]))).data
    assert values[0] == 0.0
    assert values[1] == pytest.approx(0.8413, abs=1e-4)
    assert values[2] == pytest.approx(10.0, abs=1e-6)


def test_backward_of_sum_is_all_ones(rng):
    x = Tensor(rng.normal((3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[x.uid].data, np.ones((3, 4)))


def test_backward_of_squared_norm_is_twice_x(rng):
    x = Tensor(rng.normal((5,)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x.uid].data, 2 * x.data, rtol=1e-6)


def test_full_reductions_are_rank_zero(rng):
    x = Tensor(rng.normal((3, 4)))
    assert sum_all(x).shape == ()
    assert mean_all(x).shape == ()
    weighted = mul(sum_all(x), Tensor(np.float32(2.0)))
    assert weighted.item() == pytest.approx(2.0 * float(x.data.sum()), rel=1e-6)


def test_backward_rejects_non_scalar_loss(rng):
    x = Tensor(rng.normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(RejectedInputError):
        backward(tape, y)


def test_backward_rejects_loss_not_on_tape(rng):
    x = Tensor(rng.normal((2, 2)), requires_grad=True)
    loss = sum_all(x)
    with pytest.raises(RejectedInputError):
        backward(Tape(), loss)


def test_ops_outside_tape_are_not_recorded(rng):
    x = Tensor(rng.normal((2, 2)), requires_grad=True)
    tape = Tape()
    sum_all(x)
    assert len(tape) == 0


def test_sample_norms_gradient_is_zero_at_zero_norm():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(sample_norms(x))
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[x.uid].data, 0.0)


def test_take_rows_accumulates_repeated_rows(rng):
    x = Tensor(rng.normal((3, 2)), requires_grad=True)
    index = np.array([0, 0, 2])
    with Tape() as tape:
        loss = sum_all(take_rows(x, index))
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[x.uid].data, [[2, 2], [0, 0], [1, 1]])


def test_put_rows_rejects_overlapping_index(rng):
    segments = Tensor(rng.normal((2, 2, 3)))
    with pytest.raises(RejectedInputError):
        put_rows(segments, np.array([[0, 1], [1, 2]]), 4)


@pytest.mark.parametrize("order", [[0, 1], [0, 0, 1], [0, 1, 3]])
def test_put_rows_rejects_order_that_is_not_a_permutation(rng, order):
    segments = Tensor(rng.normal((3, 2, 4)))
    index = np.array([[4, 0], [2, 5], [1, 3]])
    with pytest.raises(RejectedInputError):
        put_rows(segments, index, 6, order=order)


def test_put_rows_result_is_order_independent(rng):
    segments = Tensor(rng.normal((3, 2, 4)))
    index = np.array([[4, 0], [2, 5], [1, 3]])
    forward = put_rows(segments, index, 6, order=[0, 1, 2])
    backward_order = put_rows(segments, index, 6, order=[2, 1, 0])
    np.testing.assert_array_equal(forward.data, backward_order.data)


def test_transient_tracks_peak_of_nested_regions():
    with count_ops() as counter:
        with transient(100):
            with transient(50):
                pass
        with transient(120):
            pass
    assert counter.peak_transient_bytes == 150
    assert counter.live_transient_bytes == 0


def test_nested_counters_both_see_inner_flops(rng):
    with count_ops() as outer:
        with count_ops() as inner:
            matmul(Tensor(rng.normal((2, 2))), Tensor(rng.normal((2, 2))))
    assert outer.flops == inner.flops == 16


def test_rng_is_deterministic_per_seed():
    np.testing.assert_array_equal(Rng(7).normal((4, 4)), Rng(7).normal((4, 4)))
    assert not np.array_equal(Rng(7).normal((4, 4)), Rng(8).normal((4, 4)))


def test_truncated_normal_respects_bound(rng):
    samples = rng.truncated_normal((1000,), 0.02)
    assert np.abs(samples).max() <= 0.04 + 1e-7
