import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glom import ops
from glom import tensor as T
from glom.errors import DimensionError, GraphError
from glom.ops import BatchNormState
from glom.tensor import Tensor, backward, no_grad

from gradtools import INSTANCES, TOL, check_op

SEEDS = range(INSTANCES)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


ELEMENTWISE = {
    "add": (lambda a, b: a + b, 2),
    "add_broadcast": (lambda a, b: T.add(a, T.reshape(b, (1, -1))), 2),
    "mul": (lambda a, b: a * b, 2),
    "neg": (lambda a: -a, 1),
    "power": (lambda a: T.power(a, 3.0), 1),
    "exp": (lambda a: T.exp(a), 1),
    "sum_axis": (lambda a: T.tsum(a, axis=0), 1),
    "mean_axis": (lambda a: T.mean(a, axis=1), 1),
    "reshape": (lambda a: T.reshape(a, (-1,)), 1),
    "sigmoid": (ops.sigmoid, 1),
    "relu": (ops.relu, 1),
    "softmax": (ops.softmax, 1),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name):
    fn, arity = ELEMENTWISE[name]
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        args = [_away_from_zero(rng, shape) for _ in range(arity)]
        if name == "add_broadcast":
            args[1] = rng.normal(size=shape[1])
        assert check_op(fn, args, rng) < TOL, (name, seed)


def test_log_gradient():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        assert check_op(T.log, [rng.uniform(0.5, 3.0, (3, 4))], rng) < TOL


def test_matmul_gradient():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        n, d, k = rng.integers(1, 6, 3)
        assert check_op(T.matmul, [rng.normal(size=(n, d)), rng.normal(size=(d, k))], rng) < TOL


def test_dense_gradient():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        n, d, k = rng.integers(1, 6, 3)
        args = [rng.normal(size=(n, d)), rng.normal(size=(k, d)), rng.normal(size=k)]
        assert check_op(ops.dense, args, rng) < TOL


@pytest.mark.parametrize("channels", [(1, 3), (8, 10)], ids=["narrow", "wide"])
def test_conv2d_gradient(channels):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        c = int(rng.integers(*channels))
        f = int(rng.integers(1, 4))
        kh, kw = rng.integers(1, 4, 2)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = rng.integers(max(kh, kw) + 1, 7, 2)
        x = rng.normal(size=(2, c, h, w))
        k = rng.normal(size=(f, c, kh, kw))
        err = check_op(lambda a, b: ops.conv2d(a, b, stride, pad), [x, k], rng)
        assert err < TOL, (seed, c, stride, pad)


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 3), (3, 2), (2, 1)])
def test_maxpool_gradient(window, stride):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        # distinct values spaced well above the finite-difference step
        size = 7
        x = rng.permutation(2 * 3 * size * size).reshape(2, 3, size, size) * 0.01
        err = check_op(lambda a: ops.maxpool2d(a, window, stride), [x], rng)
        assert err < TOL, seed


def test_maxpool_ties_route_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    out = ops.maxpool2d(x, 2)
    backward(out, np.ones(out.shape))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


@pytest.mark.parametrize("relu", [False, True], ids=["plain", "fused_relu"])
@pytest.mark.parametrize("ndim", [2, 4])
def test_batchnorm_train_gradient(relu, ndim):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 5))
        shape = (4, c) if ndim == 2 else (3, c, 3, 2)
        x = rng.normal(size=shape) * 2 + 1
        g, b = rng.uniform(0.5, 2.0, c), rng.normal(size=c)

        def fn(xx, gg, bb):
            return ops.batchnorm(xx, gg, bb, BatchNormState.fresh(c), "train", relu=relu)

        assert check_op(fn, [x, g, b], rng) < TOL, seed


def test_batchnorm_eval_gradient():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        c = 3
        state = BatchNormState(rng.normal(size=c), rng.uniform(0.5, 2, c))
        fn = lambda x, g, b: ops.batchnorm(x, g, b, state, "eval")  # noqa: E731
        assert check_op(fn, [rng.normal(size=(2, c, 2, 2)), rng.normal(size=c), rng.normal(size=c)], rng) < TOL


def test_fused_relu_matches_composition():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 3, 5, 5)))
    g, b = Tensor(rng.uniform(0.5, 2, 3)), Tensor(rng.normal(size=3))
    fused = ops.batchnorm(x, g, b, BatchNormState.fresh(3), relu=True)
    plain = ops.relu(ops.batchnorm(x, g, b, BatchNormState.fresh(3)))
    np.testing.assert_array_equal(fused.data, plain.data)


def test_dropout_gradient_with_fixed_mask():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        fn = lambda x: ops.dropout(x, 0.4, "train", rng=seed)  # noqa: E731
        assert check_op(fn, [rng.normal(size=(3, 5))], rng) < TOL


def test_dropout_eval_is_identity():
    x = Tensor(np.arange(6.0))
    assert ops.dropout(x, 0.5, "eval") is x


def test_cross_entropy_gradients():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        labels = rng.integers(0, k, n)
        logits = rng.normal(size=(n, k))
        assert check_op(lambda z: ops.softmax_cross_entropy(z, labels), [logits], rng) < TOL
        assert check_op(lambda z: ops.cross_entropy(ops.softmax(z), labels), [logits], rng) < TOL


def test_fused_softmax_ce_matches_composed():
    rng = np.random.default_rng(1)
    z, y = rng.normal(size=(6, 3)), rng.integers(0, 3, 6)
    a = ops.softmax_cross_entropy(Tensor(z), y).item()
    b = ops.cross_entropy(ops.softmax(Tensor(z)), y).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_global_avg_pool_and_flatten_gradients():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, int(rng.integers(1, 5)), 3))
        assert check_op(ops.global_avg_pool, [x], rng) < TOL
        assert check_op(ops.flatten, [x], rng) < TOL


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    y = x * x + x
    backward(T.tsum(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_backward_needs_scalar_or_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        backward(x * 2.0)


def test_cycle_detected():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    x._parents = (y,)  # forge a loop
    with pytest.raises(GraphError):
        T.Graph.trace(y)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 2), st.integers(1, 3))
def test_conv_output_shape(k, h, pad, stride):
    if k > h + 2 * pad:
        return
    x = Tensor(np.zeros((1, 2, h, h)))
    out = ops.conv2d(x, Tensor(np.zeros((3, 2, k, k))), stride, pad)
    expect = (h + 2 * pad - k) // stride + 1
    assert out.shape == (1, 3, expect, expect)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    for c in (2, 9):
        x, k = rng.normal(size=(2, c, 5, 6)), rng.normal(size=(4, c, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros(out.shape)
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                ref[:, :, i, j] = np.einsum("nchw,fchw->nf", patch, k)
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))
