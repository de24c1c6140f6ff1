import numpy as np
import pytest

from medtuning.errors import ContractError, ShapeError, TapeError
from medtuning.rng import Rng
from medtuning import tensor as T
from medtuning.tensor import Tape, Tensor, backward, grad_check, tensor_new


def rand(shape, seed, std=1.0, trainable=True):
    return Tensor(Rng(seed).normal(shape, 0.0, std), trainable=trainable)


def wsum(t, seed):
    return T.reduce_sum(T.hadamard(t, Tensor(Rng(seed).normal(t.shape))))


# -------------------------------------------------------------- tensor_new

def test_new_zeros():
    t = tensor_new([2, 3], "zeros")
    assert t.shape == (2, 3)
    assert np.array_equal(t.data, np.zeros((2, 3), np.float32))


def test_new_constant():
    t = tensor_new([4], "constant", value=1.5)
    assert t.data.tolist() == [1.5, 1.5, 1.5, 1.5]


def test_new_normal_deterministic():
    a = tensor_new([8], "normal", rng=Rng(7))
    b = tensor_new([8], "normal", rng=Rng(7))
    assert np.array_equal(a.data, b.data)


def test_new_invalid_shape():
    with pytest.raises(ShapeError):
        tensor_new([], "zeros")
    with pytest.raises(ShapeError):
        tensor_new([2, 0], "zeros")


def test_new_uniform_needs_rng():
    with pytest.raises(ContractError):
        tensor_new([2], "uniform")


# ----------------------------------------------------------- primitives

def test_matmul_identity():
    eye = Tensor(np.eye(2, dtype=np.float32))
    v = Tensor([[3.0], [4.0]])
    assert T.matmul(eye, v).data.tolist() == [[3.0], [4.0]]


def test_concat_basic():
    out = T.concat([Tensor([1.0, 2.0]), Tensor([3.0])], axis=0)
    assert out.data.tolist() == [1.0, 2.0, 3.0]


def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)


def test_add_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor([1.0, 2.0]), Tensor([[1.0], [2.0]]))


def test_reshape_permute_round_trip_exact():
    x = rand((3, 4, 5), 1, trainable=False)
    back = T.permute(T.permute(x, (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(back.data, x.data)
    again = T.reshape(T.reshape(x, (12, 5)), (3, 4, 5))
    assert np.array_equal(again.data, x.data)


def test_gelu_constant_is_documented_value():
    # single point sanity for the tanh approximation
    x = Tensor([1.0])
    got = T.gelu(x).item()
    u = 0.7978845608 * (1 + 0.044715)
    want = 0.5 * (1 + np.tanh(u))
    assert abs(got - want) < 1e-6


def test_unknown_primitive():
    with pytest.raises(ContractError):
        T.forward_primitive("definitely_not_real", [Tensor([1.0])])


# ------------------------------------------------------------- backward

def test_backward_quadratic():
    x = Tensor([1.0, 2.0, 3.0], trainable=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.hadamard(x, x))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-6)


def test_backward_matmul_ones():
    # loss = sum(W @ x) -> dW = ones * x^T
    w = rand((2, 3), 5)
    x = Tensor(Rng(6).normal((3, 1)), trainable=False)
    with Tape() as tape:
        loss = T.reduce_sum(T.matmul(w, x))
    backward(loss, tape)
    want = np.ones((2, 1), np.float32) @ x.data.T
    np.testing.assert_allclose(w.grad, want, rtol=1e-5)


def test_frozen_leaf_gets_no_grad():
    w = Tensor(np.ones((2, 2), np.float32), trainable=False)
    x = Tensor(np.ones((2, 2), np.float32), trainable=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.matmul(w, x))
    backward(loss, tape)
    assert w.grad is None
    assert x.grad is not None


def test_backward_accumulates_shared_leaf():
    x = Tensor([2.0], trainable=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.hadamard(x, x))
    backward(loss, tape)
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_nonscalar_loss_rejected():
    x = Tensor([1.0, 2.0], trainable=True)
    with Tape() as tape:
        y = T.hadamard(x, x)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_backward_detached_loss_rejected():
    x = Tensor([1.0], trainable=True)
    with Tape() as tape:
        pass
    loss = T.reduce_sum(x)  # built off-tape
    with pytest.raises(TapeError):
        backward(loss, tape)


def test_backward_linearity_on_random_graphs():
    # grad of (loss1 + loss2) equals grad(loss1) + grad(loss2)
    for seed in range(3):
        x = rand((4, 3), 100 + seed)

        def l1(v):
            return wsum(T.gelu(v), 7)

        def l2(v):
            return T.reduce_sum(T.hadamard(v, v))

        x.zero_grad()
        with Tape() as tape:
            loss = T.add(l1(x), l2(x))
        backward(loss, tape)
        g_joint = x.grad.copy()

        x.zero_grad()
        with Tape() as tape:
            backward(l1(x), tape)
        g1 = x.grad.copy()
        x.zero_grad()
        with Tape() as tape:
            backward(l2(x), tape)
        g2 = x.grad.copy()
        np.testing.assert_allclose(g_joint, g1 + g2, rtol=1e-4, atol=1e-5)


def test_no_recording_without_tape():
    x = Tensor([1.0], trainable=True)
    y = T.reduce_sum(x)
    tape = Tape()
    with pytest.raises(TapeError):
        backward(y, tape)


# ------------------------------------------------------------ grad_check

def test_grad_check_linear_function_is_tiny():
    x = rand((5,), 2)
    err = grad_check(lambda p: T.reduce_sum(p[0]), [x])
    assert err < 1e-4


def test_grad_check_gelu():
    x = rand((6,), 3)
    err = grad_check(lambda p: T.reduce_sum(T.gelu(p[0])), [x])
    assert err < 1e-2


def test_grad_check_catches_wrong_gradient():
    # a deliberately wrong build: loss uses x*x but we compare against
    # the gradient of a *different* function by scaling data in build
    x = rand((4,), 4)

    calls = {"n": 0}

    def sneaky(point):
        calls["n"] += 1
        v = point[0]
        if calls["n"] == 1:
            return T.reduce_sum(T.hadamard(v, v))
        return T.reduce_sum(T.scale(v, 3.0))

    err = grad_check(sneaky, [x])
    assert err > 0.1


def test_grad_check_rejects_nonscalar():
    x = rand((4,), 5)
    with pytest.raises(ContractError):
        grad_check(lambda p: T.hadamard(p[0], p[0]), [x])
