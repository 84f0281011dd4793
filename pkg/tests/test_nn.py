import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aadit.errors import ConfigError, InputError, InternalError, NumericalError
from aadit.nn import (FeedForwardStack, Layer, ParamBlock, finite_diff_grad, relative_error, sgd_step,
                      softmax, softmax_xent, stack_backward, stack_forward, zero_grads)


def one_layer(W, b, act):
    W = np.asarray(W, dtype=float)
    return FeedForwardStack([Layer(ParamBlock("W", W), ParamBlock("b", np.reshape(b, (-1, 1))), act)])


def random_stack(seed, dims=(4, 6, 3), final="identity"):
    rng = np.random.default_rng(seed)
    stack = FeedForwardStack.build(list(dims), rng, "s", final_activation=final)
    for p in stack.params():
        p.value[...] = rng.normal(scale=0.6, size=p.shape)
    return stack, rng


def test_identity_layer_forward():
    stack = one_layer(np.eye(2), [0, 0], "identity")
    out, _ = stack_forward(stack, np.array([[1.0], [2.0]]))
    assert out.ravel().tolist() == [1.0, 2.0]


def test_zero_weight_tanh_layer():
    stack = one_layer(np.zeros((3, 2)), [0.5, 0.5, 0.5], "tanh")
    out, _ = stack_forward(stack, np.array([[7.0], [-3.0]]))
    np.testing.assert_allclose(out.ravel(), 0.46211715726000974, rtol=0, atol=1e-15)


def test_two_layer_matches_scalar_recomputation():
    stack, rng = random_stack(1)
    x = rng.normal(size=4)
    out, _ = stack_forward(stack, x[:, None])
    (W1, b1), (W2, b2) = [(l.weights.value, l.bias.value[:, 0]) for l in stack.layers]
    hidden = [math.tanh(sum(W1[i, j] * x[j] for j in range(4)) + b1[i]) for i in range(6)]
    expected = [sum(W2[k, i] * hidden[i] for i in range(6)) + b2[k] for k in range(3)]
    np.testing.assert_allclose(out.ravel(), expected, rtol=1e-13)


def test_dimension_mismatch_names_layer():
    stack, _ = random_stack(0)
    with pytest.raises(ConfigError, match="layer 0"):
        stack_forward(stack, np.zeros((5, 2)))
    with pytest.raises(ConfigError, match="layer 0 emits"):
        FeedForwardStack([Layer(ParamBlock("a", np.zeros((3, 2))), ParamBlock("b", np.zeros((3, 1)))),
                          Layer(ParamBlock("c", np.zeros((1, 4))), ParamBlock("d", np.zeros((1, 1))))])


def test_backward_identity_base_case():
    stack = one_layer(np.eye(2), [0, 0], "identity")
    x = np.array([[1.0, -1.0], [2.0, 0.5]])
    g = np.array([[0.3, 0.1], [-0.2, 0.4]])
    _, cache = stack_forward(stack, x)
    gin = stack_backward(stack, cache, g)
    np.testing.assert_array_equal(gin, g)
    np.testing.assert_allclose(stack.layers[0].weights.grad, g @ x.T, rtol=1e-15)


def test_backward_zero_grad_output():
    stack, rng = random_stack(2)
    _, cache = stack_forward(stack, rng.normal(size=(4, 5)))
    gin = stack_backward(stack, cache, np.zeros((3, 5)))
    assert not gin.any()
    assert all(not p.grad.any() for p in stack.params())


def test_backward_rejects_foreign_cache():
    a, rng = random_stack(3)
    b, _ = random_stack(4)
    _, cache = stack_forward(a, rng.normal(size=(4, 2)))
    with pytest.raises(InternalError):
        stack_backward(b, cache, np.zeros((3, 2)))
    with pytest.raises(InternalError):
        stack_backward(a, cache, np.zeros((3, 7)))


@pytest.mark.parametrize("seed", range(20))
def test_stack_gradients_match_finite_differences(seed):
    stack, rng = random_stack(seed, dims=(4, 6, 5, 3))
    x = ParamBlock("x", rng.normal(size=(4, 7)))
    G = rng.normal(size=(3, 7))

    def loss():
        return float(np.sum(stack_forward(stack, x.value)[0] * G))

    zero_grads(stack.params())
    _, cache = stack_forward(stack, x.value)
    gin = stack_backward(stack, cache, G)
    blocks = stack.params() + [x]
    numeric = finite_diff_grad(loss, blocks, h=1e-5)
    for blk, num in zip(stack.params(), numeric):
        assert relative_error(blk.grad, num) < 1e-6, blk.name
    assert relative_error(gin, numeric[-1]) < 1e-6


def test_forward_is_bit_deterministic():
    stack, rng = random_stack(5)
    x = rng.normal(size=(4, 11))
    a, _ = stack_forward(stack, x)
    b, _ = stack_forward(stack, x.copy())
    assert a.tobytes() == b.tobytes()


def test_xent_uniform_logits():
    loss, grad = softmax_xent(np.zeros((5, 3)), [0, 4, 2])
    assert loss == pytest.approx(math.log(5), abs=1e-15)
    np.testing.assert_allclose(grad.sum(axis=0), 0.0, atol=1e-16)


def test_xent_saturated_correct():
    logits = np.zeros((4, 2))
    logits[1, 0] = logits[3, 1] = 1000.0
    loss, grad = softmax_xent(logits, [1, 3])
    assert loss == pytest.approx(0.0, abs=1e-300)
    assert np.abs(grad).max() < 1e-300


def test_xent_matches_finite_differences():
    rng = np.random.default_rng(7)
    z = ParamBlock("z", rng.normal(size=(4, 3)))
    labels = [3, 0, 2]
    _, grad = softmax_xent(z.value, labels)
    (num,) = finite_diff_grad(lambda: softmax_xent(z.value, labels)[0], [z], h=1e-5)
    assert relative_error(grad, num) < 1e-6


def test_xent_label_out_of_range():
    with pytest.raises(InputError):
        softmax_xent(np.zeros((3, 2)), [0, 3])
    with pytest.raises(InputError):
        softmax_xent(np.zeros((3, 2)), [-1, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(-500, 500))
def test_xent_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=3.0, size=(6, 4))
    labels = rng.integers(0, 6, size=4)
    a, _ = softmax_xent(z, labels)
    b, _ = softmax_xent(z + shift, labels)
    assert abs(a - b) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 300))
def test_softmax_columns_are_distributions(seed, scale):
    z = np.random.default_rng(seed).normal(scale=scale, size=(7, 5))
    p = softmax(z)
    assert p.min() >= 0.0 and p.max() <= 1.0
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)


def test_sgd_one_step():
    p = ParamBlock("theta", [[1.0]])
    p.grad[...] = 2.0
    sgd_step([p], 0.1)
    assert p.value[0, 0] == pytest.approx(0.8, abs=1e-15)
    assert p.grad[0, 0] == 0.0


def test_sgd_zero_rate_is_noop():
    p = ParamBlock("theta", [[1.5, -2.0]])
    p.grad[...] = [[3.0, 4.0]]
    sgd_step([p], 0.0)
    assert p.value.tolist() == [[1.5, -2.0]]


def test_sgd_matches_closed_form_quadratic_descent():
    # f(θ) = ½ θᵀAθ − bᵀθ, exact iterate: θ_k − θ* = (I − μA)^k (θ_0 − θ*)
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    b = np.array([1.0, -2.0])
    mu = 0.1
    theta0 = np.array([2.0, 1.0])
    star = np.linalg.solve(A, b)
    p = ParamBlock("theta", theta0[:, None])
    for k in range(1, 3):
        p.grad[:, 0] = A @ p.value[:, 0] - b
        sgd_step([p], mu)
        expected = star + np.linalg.matrix_power(np.eye(2) - mu * A, k) @ (theta0 - star)
        np.testing.assert_allclose(p.value[:, 0], expected, rtol=1e-14)
    # a single step with the gradient frozen at θ_0 twice over does not land there
    frozen = theta0 - 2 * mu * (A @ theta0 - b)
    assert not np.allclose(frozen, p.value[:, 0], rtol=1e-6)


def test_sgd_non_finite_aborts_without_update():
    good = ParamBlock("good", [[1.0]])
    bad = ParamBlock("M_d.0.W", [[1.0, 2.0]])
    good.grad[...] = 1.0
    bad.grad[0, 1] = np.nan
    with pytest.raises(NumericalError, match="M_d.0.W"):
        sgd_step([good, bad], 0.1)
    assert good.value[0, 0] == 1.0 and bad.value.tolist() == [[1.0, 2.0]]


def test_finite_diff_quadratic_and_constant():
    p = ParamBlock("t", [[3.0]])
    (g,) = finite_diff_grad(lambda: float(p.value[0, 0] ** 2), [p], h=1e-5)
    assert abs(g[0, 0] - 6.0) <= 1e-9
    (g,) = finite_diff_grad(lambda: 4.2, [p], h=1e-5)
    assert g[0, 0] == 0.0
    assert p.value[0, 0] == 3.0


def test_finite_diff_handles_non_contiguous_values():
    p = ParamBlock("t", np.arange(6.0).reshape(2, 3))
    p.value = p.value.T  # a strided view
    (g,) = finite_diff_grad(lambda: float(np.sum(p.value ** 2)), [p], h=1e-4)
    np.testing.assert_allclose(g, 2 * p.value, rtol=1e-9)
