"""Tape autodiff, forward ops and the DFT1 tensor format."""

import math

import numpy as np
import pytest

from dragonfly import ops, tensorio
from dragonfly.gradcheck import grad_check
from dragonfly.tensor import DomainError, NonFiniteError, ShapeError, Tape, Tensor, backward


def _param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestForwardExamples:
    def test_delta_kernel_conv(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = ops.conv2d(x, Tensor(w))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 1.0

    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_maxpool_global_max(self):
        x = Tensor(np.arange(25.0).reshape(1, 1, 5, 5))
        out = ops.maxpool(x, 5, 2)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 24.0

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        p = ops.softmax(Tensor(rng.standard_normal((50, 7)) * 30)).data
        assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
        assert np.all(p >= 0) and np.all(p <= 1)

    def test_softmax_large_logits_finite(self):
        p = ops.softmax(Tensor([[1e4, -1e4, 0.0]])).data
        assert np.isfinite(p).all()
        np.testing.assert_allclose(p[0], [1.0, 0.0, 0.0])

    def test_depthwise_then_pointwise_matches_full_conv(self):
        # a depthwise-separable conv equals a full conv whose kernel is the outer product
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        dw = rng.standard_normal((3, 3, 3))
        pw = rng.standard_normal((4, 3))
        full = np.einsum("oc,ckl->ockl", pw, dw)
        a = ops.pointwise_conv(ops.depthwise_conv2d(x, Tensor(dw)), Tensor(pw)).data
        b = ops.conv2d(x, Tensor(full)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_conv_matches_naive_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(w)).data
        ref = np.zeros((1, 3, 3, 4))
        for o in range(3):
            for i in range(3):
                for j in range(4):
                    ref[0, o, i, j] = np.sum(x[0, :, i:i + 3, j:j + 3] * w[o])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_same_padding_keeps_extent(self):
        x = Tensor(np.ones((1, 1, 7, 7)))
        assert ops.conv2d(x, Tensor(np.ones((2, 1, 3, 3))), padding="same").shape == (1, 2, 7, 7)
        assert ops.maxpool(x, 5, 2, padding="same").shape == (1, 1, 4, 4)

    @pytest.mark.parametrize("size,window,stride", [(9, 5, 2), (10, 3, 3), (32, 11, 5), (7, 7, 3), (12, 5, 1)])
    def test_pool_extent_floor_rule(self, size, window, stride):
        x = Tensor(np.zeros((1, 1, size, size)))
        expect = (size - window) // stride + 1
        for fn in (ops.maxpool, ops.avgpool):
            assert fn(x, window, stride).shape == (1, 1, expect, expect)

    def test_avgpool_value(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_allclose(ops.avgpool(x, 2, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_batchnorm_normalizes(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((8, 3, 4, 4)) * 5 + 2)
        y, mu, var = ops.batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-3)
        np.testing.assert_allclose(mu, x.data.mean(axis=(0, 2, 3)))

    def test_determinism(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        a = ops.maxpool(ops.relu(ops.conv2d(x, w)), 3, 2).data
        b = ops.maxpool(ops.relu(ops.conv2d(x, w)), 3, 2).data
        assert np.array_equal(a, b)


class TestErrors:
    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError) as exc:
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        assert exc.value.op == "matmul"
        assert (2, 3) in exc.value.shapes

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))

    def test_softlog_domain(self):
        with pytest.raises(DomainError):
            ops.softlog(Tensor([0.5, 1.1]))
        with pytest.raises(DomainError):
            ops.softlog(Tensor([-1e-6]))

    def test_softlog_tolerance_band_clamps(self):
        out = ops.softlog(Tensor([-1e-10, 1 + 1e-10])).data
        np.testing.assert_array_equal(out, [-1.0, 1.0])

    def test_nonfinite_outside_tape_raises(self):
        with pytest.raises(NonFiniteError) as exc:
            ops.log(Tensor([0.0]))
        assert exc.value.op == "log"


class TestBackward:
    def test_linear_map_gradient_is_broadcast_input(self):
        x = np.array([1.0, -2.0, 3.0])
        w = Tensor(np.ones((2, 3)), requires_grad=True)
        with Tape([w]) as tape:
            loss = ops.sum(ops.matmul(w, Tensor(x.reshape(3, 1))))
        g = backward(tape, loss)[w]
        np.testing.assert_array_equal(g, np.broadcast_to(x, (2, 3)))

    def test_softlog_gradient_at_zero(self):
        p = Tensor([0.0], requires_grad=True)
        with Tape([p]) as tape:
            loss = ops.sum(ops.softlog(p))
        g = backward(tape, loss)[p]
        a, b = math.e - 1 / math.e, 1 / math.e
        assert abs(g[0] - a / b) < 1e-12
        assert abs(g[0] - 6.3890561) < 1e-7

    def test_untouched_parameter_gets_zero(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([[3.0]], requires_grad=True)
        with Tape([a, b]) as tape:
            loss = ops.sum(ops.mul(a, a))
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[a], [2.0, 4.0])
        np.testing.assert_array_equal(grads[b], [[0.0]])

    def test_reused_input_accumulates(self):
        a = Tensor([3.0], requires_grad=True)
        with Tape([a]) as tape:
            loss = ops.sum(ops.add(ops.mul(a, a), a))
        assert backward(tape, loss)[a][0] == 7.0

    def test_nonscalar_loss_rejected(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with Tape([a]) as tape:
            y = ops.mul(a, a)
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_nonfinite_loss_reports_first_op(self):
        p = Tensor([0.0, 1.0], requires_grad=True)
        with Tape([p]) as tape:
            loss = ops.sum(ops.neg(ops.log(p)))
        with pytest.raises(NonFiniteError) as exc:
            backward(tape, loss)
        assert exc.value.op == "log"

    def test_dense_layer_gradcheck(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((4, 5)))
        w = _param(rng, 5, 3)
        proj = Tensor(rng.standard_normal((4, 3)))
        rep = grad_check(lambda: ops.sum(ops.mul(ops.matmul(x, w), proj)), [w], eps=1e-5)
        assert rep.max_error < 1e-6

    def test_batchnorm_training_gradcheck(self):
        rng = np.random.default_rng(1)
        x = _param(rng, 4, 3, 5, 5)
        g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        b = _param(rng, 3)
        proj = Tensor(rng.standard_normal((4, 3, 5, 5)))

        def loss():
            y, _, _ = ops.batchnorm(x, g, b)
            return ops.sum(ops.mul(y, proj))

        assert grad_check(loss, [x, g, b], eps=1e-5).max_error < 1e-4


_OPS = ["conv2d", "depthwise", "pointwise", "relu", "maxpool", "avgpool", "concat",
        "affine_combine", "softmax", "softlog", "matmul", "batchnorm"]


def _op_case(name, rng):
    """(loss builder, params) for one op on random small shapes."""
    n, c, h = rng.integers(1, 3), rng.integers(1, 4), rng.integers(5, 9)
    x = _param(rng, n, c, h, h)
    if name == "conv2d":
        w = _param(rng, rng.integers(1, 4), c, 3, 3)
        pad = rng.choice(["valid", "same"])
        return (lambda: ops.conv2d(x, w, padding=pad)), [x, w]
    if name == "depthwise":
        w = _param(rng, c, 3, 3)
        return (lambda: ops.depthwise_conv2d(x, w)), [x, w]
    if name == "pointwise":
        w = _param(rng, rng.integers(1, 4), c)
        return (lambda: ops.pointwise_conv(x, w)), [x, w]
    if name == "relu":
        return (lambda: ops.relu(x)), [x]
    if name == "maxpool":
        m, s = int(rng.integers(2, 5)), int(rng.integers(1, 3))
        return (lambda: ops.maxpool(x, m, s)), [x]
    if name == "avgpool":
        m, s = int(rng.integers(2, 5)), int(rng.integers(1, 3))
        return (lambda: ops.avgpool(x, m, s)), [x]
    if name == "concat":
        y = _param(rng, n, 2)
        z = _param(rng, n, 3)
        return (lambda: ops.concat([y, z], axis=-1)), [y, z]
    if name == "affine_combine":
        ts = [_param(rng, n, 3) for _ in range(3)]
        a = _param(rng, 3)
        return (lambda: ops.affine_combine(ts, a)), ts + [a]
    if name == "softmax":
        z = _param(rng, n, 4)
        return (lambda: ops.softmax(z)), [z]
    if name == "softlog":
        p = Tensor(rng.uniform(0.05, 0.95, (n, 4)), requires_grad=True)
        return (lambda: ops.softlog(p)), [p]
    if name == "matmul":
        a, b = _param(rng, n, 4), _param(rng, 4, 3)
        return (lambda: ops.matmul(a, b)), [a, b]
    if name == "batchnorm":
        g, b = Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True), _param(rng, c)
        xb = _param(rng, 3, c, h, h)
        return (lambda: ops.batchnorm(xb, g, b)[0]), [xb, g, b]
    raise KeyError(name)


@pytest.mark.parametrize("name", _OPS)
def test_op_gradients_match_finite_differences(name):
    # 20 random small shapes per op
    rng = np.random.default_rng(_OPS.index(name))
    worst = 0.0
    for _ in range(20):
        out_fn, params = _op_case(name, rng)
        shape = out_fn().shape
        proj = Tensor(rng.standard_normal(shape))
        rep = grad_check(lambda: ops.sum(ops.mul(out_fn(), proj)), params, eps=1e-5, max_entries=12,
                         seed=int(rng.integers(1 << 30)))
        worst = max(worst, rep.max_error)
    assert worst < 1e-4


class TestTensorIO:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32, np.int64])
    def test_round_trip(self, tmp_path, dtype):
        arr = (np.random.default_rng(0).standard_normal((3, 4, 2)) * 10).astype(dtype)
        path = tensorio.save(tmp_path / "a.dft1", arr)
        back = tensorio.load(path)
        assert back.dtype == arr.dtype
        assert np.array_equal(back, arr)

    def test_magic_checked(self):
        buf = bytearray(tensorio.encode(np.zeros(3)))
        buf[:4] = b"XXXX"
        with pytest.raises(tensorio.TensorFileError):
            tensorio.decode(bytes(buf))

    def test_truncation_detected(self):
        buf = tensorio.encode(np.zeros((4, 4)))
        with pytest.raises(tensorio.TensorFileError):
            tensorio.decode(buf[:-8])
