import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epd_sgg.numcore import (
    Affine,
    BatchNormState,
    DimensionError,
    NumericError,
    Stack,
    Tensor,
    affine,
    batchnorm,
    concat,
    embedding_lookup,
    float64_oracle,
    hadamard,
    linear_combination,
    parameter,
    relu,
    sgd_step,
    softmax_cross_entropy,
)
from gradcheck import TOL, numeric_grad_tensor, rel_error
from opcases import CASES, worst_error


# affine

def test_affine_identity_weights_return_input(rng):
    x = rng.standard_normal((4, 3)).astype(np.float32)
    out = affine(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(out.value, x)


def test_affine_zero_input_gives_bias_rows():
    b = np.array([1.5, -2.0], dtype=np.float32)
    out = affine(np.zeros((3, 4)), np.ones((4, 2)), b)
    np.testing.assert_array_equal(out.value, np.tile(b, (3, 1)))


def test_affine_matches_scalar_loops(rng):
    x = rng.standard_normal((2, 3))
    W = rng.standard_normal((3, 2))
    b = rng.standard_normal(2)
    expect = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            acc = b[j]
            for k in range(3):
                acc += x[i, k] * W[k, j]
            expect[i, j] = acc
    np.testing.assert_allclose(affine(x, W, b).value, expect, rtol=1e-6, atol=1e-6)


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        affine(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        affine(np.zeros((2, 3)), np.zeros((3, 2)), np.zeros(3))


# concat

def test_concat_single_input_is_identity():
    a = Tensor(np.ones((2, 3)))
    assert concat([a]) is a


def test_concat_blocks_in_order(rng):
    A = rng.standard_normal((3, 2)).astype(np.float32)
    B = rng.standard_normal((3, 3)).astype(np.float32)
    out = concat([A, B]).value
    assert out.shape == (3, 5)
    np.testing.assert_array_equal(out[:, :2], A)
    np.testing.assert_array_equal(out[:, 2:], B)


def test_concat_sum_gradient_is_ones(rng):
    A = parameter(rng.standard_normal((3, 2)))
    B = parameter(rng.standard_normal((3, 4)))
    concat([A, B]).backward(np.ones((3, 6)))
    np.testing.assert_array_equal(A.grad, np.ones((3, 2)))
    np.testing.assert_array_equal(B.grad, np.ones((3, 4)))


def test_concat_errors():
    with pytest.raises(DimensionError):
        concat([])
    with pytest.raises(DimensionError):
        concat([np.zeros((2, 1)), np.zeros((3, 1))])


# hadamard

def test_hadamard_ones_and_zeros(rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(hadamard(x, np.ones((3, 4))).value, x)
    np.testing.assert_array_equal(hadamard(np.zeros((3, 4)), x).value, np.zeros((3, 4)))


def test_hadamard_matches_loop(rng):
    x = rng.standard_normal((4, 4)).astype(np.float32)
    y = rng.standard_normal((4, 4)).astype(np.float32)
    out = hadamard(x, y).value
    for i in range(4):
        for j in range(4):
            assert out[i, j] == np.float32(x[i, j] * y[i, j])


def test_hadamard_shape_mismatch():
    with pytest.raises(DimensionError):
        hadamard(np.zeros((2, 2)), np.zeros((2, 3)))


# batchnorm

def test_batchnorm_constant_batch_returns_beta():
    state = BatchNormState.create(3)
    state.gamma.value[:] = [2.0, -1.0, 0.5]
    state.beta.value[:] = [0.1, 0.2, 0.3]
    out = batchnorm(np.full((5, 3), 7.0), state, "train").value
    np.testing.assert_allclose(out, np.tile(state.beta.value, (5, 1)), atol=1e-6)


def test_batchnorm_standardizes_columns(rng):
    state = BatchNormState.create(4)
    x = rng.standard_normal((64, 4)) * 5 + 3
    out = batchnorm(x, state, "train").value.astype(np.float64)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-5)


def test_batchnorm_running_stats_update(rng):
    state = BatchNormState.create(2, momentum=0.1)
    x = rng.standard_normal((8, 2)).astype(np.float32)
    batchnorm(x, state, "train")
    x64 = x.astype(np.float64)
    np.testing.assert_allclose(state.running_mean, 0.1 * x64.mean(axis=0), rtol=1e-6)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x64.var(axis=0, ddof=1), rtol=1e-6)


def test_batchnorm_eval_uses_running_stats(rng):
    state = BatchNormState.create(2)
    state.running_mean[:] = [1.0, -1.0]
    state.running_var[:] = [4.0, 0.25]
    x = rng.standard_normal((3, 2)).astype(np.float32)
    before = state.running_mean.copy()
    out = batchnorm(x, state, "eval").value
    expect = (x - state.running_mean) / np.sqrt(state.running_var + 1e-5)
    np.testing.assert_allclose(out, expect, rtol=1e-5)
    np.testing.assert_array_equal(state.running_mean, before)


def test_batchnorm_single_row_is_finite():
    state = BatchNormState.create(3)
    out = batchnorm(np.array([[1.0, 2.0, 3.0]]), state, "train")
    assert np.isfinite(out.value).all()


def test_batchnorm_channel_mismatch():
    with pytest.raises(DimensionError):
        batchnorm(np.zeros((2, 3)), BatchNormState.create(4))


# cross-entropy

def test_ce_uniform_logits_is_log_c():
    loss = softmax_cross_entropy(np.zeros((4, 7)), np.array([0, 1, 2, 6]))
    assert loss.item() == pytest.approx(np.log(7), rel=1e-6)


def test_ce_decreases_as_target_logit_grows():
    losses = []
    for t in (0.0, 1.0, 3.0, 10.0, 30.0):
        z = np.array([[t, 0.0, 0.0]])
        losses.append(softmax_cross_entropy(z, np.array([0])).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-6


def test_ce_gradient_formula(rng):
    z = parameter(rng.standard_normal((3, 5)))
    t = np.array([4, 0, 2])
    softmax_cross_entropy(z, t).backward()
    p = np.exp(z.value - z.value.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(3), t] -= 1
    np.testing.assert_allclose(z.grad, p / 3, rtol=1e-5, atol=1e-7)


def test_ce_mask_zeroes_unselected_rows(rng):
    z = parameter(rng.standard_normal((4, 3)))
    softmax_cross_entropy(z, np.array([0, 1, 2, 0]), mask=[True, False, True, False]).backward()
    assert np.all(z.grad[[1, 3]] == 0.0)
    assert np.any(z.grad[[0, 2]] != 0.0)


def test_ce_empty_mask_is_zero():
    loss = softmax_cross_entropy(np.ones((2, 3)), np.array([0, 1]), mask=[False, False])
    assert loss.item() == 0.0


def test_ce_target_out_of_range():
    with pytest.raises(IndexError):
        softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


def test_ce_stable_for_huge_logits():
    loss = softmax_cross_entropy(np.array([[1e4, -1e4, 0.0]]), np.array([0]))
    assert np.isfinite(loss.item())


# embedding

def test_embedding_single_row():
    table = np.arange(6, dtype=np.float32).reshape(3, 2)
    np.testing.assert_array_equal(embedding_lookup(table, [0]).value, [[0.0, 1.0]])


def test_embedding_repeated_id_accumulates():
    table = parameter(np.ones((3, 2)))
    out = embedding_lookup(table, [1, 1])
    out.backward(np.ones((2, 2)))
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0]])


def test_embedding_matches_loop_gather(rng):
    table = rng.standard_normal((6, 4)).astype(np.float32)
    ids = rng.integers(0, 6, size=9)
    out = embedding_lookup(table, ids).value
    for r, i in enumerate(ids):
        np.testing.assert_array_equal(out[r], table[i])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        embedding_lookup(np.zeros((3, 2)), [3])


# sgd

def test_sgd_zero_lr_leaves_params_bitwise(rng):
    p = parameter(rng.standard_normal(5))
    before = p.value.copy()
    p.grad[:] = rng.standard_normal(5)
    sgd_step([p], 0.0)
    assert p.value.tobytes() == before.tobytes()


def test_sgd_zero_grad_leaves_params(rng):
    p = parameter(rng.standard_normal(5))
    before = p.value.copy()
    sgd_step([p], 0.1)
    np.testing.assert_array_equal(p.value, before)


def test_sgd_direct_substitution():
    p = parameter(np.array([1.0]))
    p.grad[:] = 0.5
    sgd_step([p], 0.1)
    assert p.value[0] == pytest.approx(0.95, abs=1e-7)


def test_sgd_does_not_touch_running_stats(rng):
    state = BatchNormState.create(2)
    batchnorm(rng.standard_normal((4, 2)), state, "train").backward(np.ones((4, 2)))
    rm, rv = state.running_mean.copy(), state.running_var.copy()
    sgd_step(state.parameters(), 0.5)
    np.testing.assert_array_equal(state.running_mean, rm)
    np.testing.assert_array_equal(state.running_var, rv)


# finite differences

@pytest.mark.parametrize("op", sorted(CASES))
def test_op_gradients_match_finite_differences(op):
    assert worst_error(op, 25, seed=7) < TOL


def test_stack_gradient_through_own_ops(rng):
    # the float64 oracle mode lets the finite differences run our own graph
    stack = Stack.create(rng, [3, 4, 2], "s")
    x = rng.standard_normal((5, 3)).astype(np.float32)
    R = rng.standard_normal((5, 2))

    def f():
        return float((stack(x).value * R).sum())

    stack(x).backward(R)
    W = stack.layers[0].W
    assert rel_error(W.grad, numeric_grad_tensor(f, W)) < TOL


def test_float64_oracle_is_scoped():
    with float64_oracle():
        assert Tensor([1.0]).value.dtype == np.float64
    assert Tensor([1.0]).value.dtype == np.float32


# graph mechanics

def test_shared_node_gradients_accumulate():
    x = parameter(np.array([[2.0, 3.0]]))
    y = hadamard(x, x)
    y.backward(np.ones((1, 2)))
    np.testing.assert_array_equal(x.grad, [[4.0, 6.0]])


def test_linear_combination_unit_weight_is_bitwise(rng):
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((3, 4)))
    out = linear_combination([a, b], [1.0, 0.0])
    assert out.value.tobytes() == a.value.tobytes()


def test_relu_gradient_mask():
    x = parameter(np.array([[-1.0, 0.0, 2.0]]))
    relu(x).backward(np.ones((1, 3)))
    np.testing.assert_array_equal(x.grad, [[0.0, 0.0, 1.0]])


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        affine(np.array([[np.inf]]), np.ones((1, 1)), np.zeros(1))


def test_backward_requires_scalar_or_upstream():
    x = parameter(np.ones((2, 2)))
    with pytest.raises(DimensionError):
        relu(x).backward()


def test_forward_is_deterministic(rng):
    seed_rng = np.random.default_rng(5)
    layer = Affine.create(seed_rng, 6, 3, "a")
    x = rng.standard_normal((7, 6)).astype(np.float32)
    assert layer(x).value.tobytes() == layer(x).value.tobytes()


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(1, 6),
    c=st.integers(1, 4),
    scale=st.floats(0.0, 1e3),
    seed=st.integers(0, 2**16),
)
def test_batchnorm_never_emits_non_finite(n, c, scale, seed):
    x = np.random.default_rng(seed).standard_normal((n, c)) * scale
    out = batchnorm(x, BatchNormState.create(c), "train")
    assert np.isfinite(out.value).all()
