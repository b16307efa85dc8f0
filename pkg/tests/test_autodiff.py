"""Gradient correctness of every op, checked against finite differences.

The finite-difference side perturbs the float32 parameter, reruns the op's
own forward, and projects the output onto a fixed random direction; the
comparison tolerance accounts for float32 storage noise.
"""

import numpy as np
import pytest

from pmkd import optim
from pmkd.tensor import (
    ConvGeometry,
    ShapeError,
    Tape,
    Tensor,
    backward,
    batchnorm2d,
    conv2d,
    cross_entropy,
    ew_mul,
    global_avg_pool,
    kl_div_temperature,
    linear,
    max_pool2x2,
    mse,
    record_on,
    relu,
    softmax_temperature,
    sum_all,
)


def _proj_loss(out: Tensor, direction: np.ndarray) -> Tensor:
    return sum_all(ew_mul(out, Tensor(direction)))


def _num_grad(forward, param: np.ndarray, direction, h=1e-3, samples=12, seed=0):
    """Central finite differences of direction . forward(param)."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(param.size, size=min(samples, param.size), replace=False)
    grads = np.zeros(param.size)
    for i in idx:
        orig = param.flat[i]
        param.flat[i] = orig + h
        up = float((forward() * direction).sum(dtype=np.float64))
        param.flat[i] = orig - h
        dn = float((forward() * direction).sum(dtype=np.float64))
        param.flat[i] = orig
        grads[i] = (up - dn) / (2 * h)
    return idx, grads.reshape(param.shape)


def _check_grad(op_builder, tensors, seed=0, rtol=2e-2, atol=2e-4):
    """op_builder() -> Tensor output; checks each tensor's autodiff grad."""
    tape = Tape()
    with record_on(tape):
        out = op_builder()
        rng = np.random.default_rng(seed + 100)
        direction = rng.standard_normal(out.shape).astype(np.float32)
        loss = _proj_loss(out, direction)
    backward(tape, loss)
    for k, t in enumerate(tensors):
        idx, num = _num_grad(lambda: op_builder().data, t.data, direction,
                             seed=seed + k)
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        for i in idx:
            a, n = got.flat[i], num.flat[i]
            assert abs(a - n) <= atol + rtol * max(abs(a), abs(n)), \
                f"tensor {k} coord {i}: autodiff {a} vs numeric {n}"


def P(a, seed=None, scale=0.5, shape=None):
    if shape is not None:
        rng = np.random.default_rng(seed)
        a = rng.standard_normal(shape) * scale
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)


class TestOpGradients:
    @pytest.mark.parametrize("geom", [
        ConvGeometry.square3(), ConvGeometry.row3(), ConvGeometry.col3(),
        ConvGeometry.point(), ConvGeometry.square3(2), ConvGeometry.row3(2),
    ])
    def test_conv2d(self, geom):
        x = P(None, seed=1, shape=(2, 3, 6, 6))
        w = P(None, seed=2, shape=(4, 3, geom.kernel_h, geom.kernel_w))
        b = P(None, seed=3, shape=(4,))
        _check_grad(lambda: conv2d(x, w, b, geom), [x, w, b], seed=5)

    def test_batchnorm_train(self):
        x = P(None, seed=4, shape=(4, 3, 5, 5), scale=1.0)
        g = P(np.array([1.0, 0.8, 1.2]))
        be = P(np.array([0.1, -0.2, 0.0]))
        rm = np.zeros(3, np.float32)
        rv = np.ones(3, np.float32)

        def run():
            return batchnorm2d(x, g, be, rm.copy(), rv.copy(), training=True)

        _check_grad(run, [x, g, be], seed=6)

    def test_batchnorm_eval(self):
        x = P(None, seed=5, shape=(2, 3, 4, 4), scale=1.0)
        g = P(np.array([1.0, 0.8, 1.2]))
        be = P(np.array([0.1, -0.2, 0.0]))
        rm = np.array([0.2, -0.1, 0.5], np.float32)
        rv = np.array([1.5, 0.7, 1.0], np.float32)
        _check_grad(lambda: batchnorm2d(x, g, be, rm, rv, training=False),
                    [x, g, be], seed=7)

    def test_linear(self):
        x = P(None, seed=8, shape=(4, 6))
        w = P(None, seed=9, shape=(3, 6))
        b = P(None, seed=10, shape=(3,))
        _check_grad(lambda: linear(x, w, b), [x, w, b], seed=11)

    def test_relu(self):
        x = P(None, seed=12, shape=(3, 4), scale=1.0)
        _check_grad(lambda: relu(x), [x], seed=13)

    def test_max_pool(self):
        # values spread out so finite differences stay away from ties
        rng = np.random.default_rng(14)
        vals = rng.permutation(np.linspace(-2, 2, 2 * 2 * 4 * 4))
        x = P(vals.reshape(2, 2, 4, 4))
        _check_grad(lambda: max_pool2x2(x), [x], seed=15)

    def test_max_pool_tie_break_lowest_index(self):
        x = Tensor(np.array([[5.0, 5.0], [5.0, 5.0]]).reshape(1, 1, 2, 2),
                   requires_grad=True)
        tape = Tape()
        with record_on(tape):
            loss = sum_all(max_pool2x2(x))
        backward(tape, loss)
        np.testing.assert_array_equal(
            x.grad.ravel(), [1.0, 0.0, 0.0, 0.0])

    def test_global_avg_pool(self):
        x = P(None, seed=16, shape=(2, 3, 4, 4))
        _check_grad(lambda: global_avg_pool(x), [x], seed=17)

    def test_softmax_temperature(self):
        x = P(None, seed=18, shape=(3, 5), scale=2.0)
        _check_grad(lambda: softmax_temperature(x, 3.0), [x], seed=19)

    def test_cross_entropy(self):
        x = P(None, seed=20, shape=(4, 6), scale=2.0)
        y = np.array([0, 2, 5, 3])
        _check_grad(lambda: cross_entropy(x, y), [x], seed=21)

    def test_kl_div(self):
        t = np.random.default_rng(22).standard_normal((3, 5)).astype(np.float32)
        s = P(None, seed=23, shape=(3, 5), scale=2.0)
        _check_grad(lambda: kl_div_temperature(Tensor(t), s, 4.0), [s], seed=24)

    def test_kl_div_teacher_side_gets_no_gradient(self):
        t = P(None, seed=25, shape=(3, 5))
        s = P(None, seed=26, shape=(3, 5))
        tape = Tape()
        with record_on(tape):
            loss = kl_div_temperature(t, s, 2.0)
        backward(tape, loss)
        assert t.grad is None
        assert s.grad is not None

    def test_mse(self):
        a = P(None, seed=27, shape=(3, 4))
        b = P(None, seed=28, shape=(3, 4))
        _check_grad(lambda: mse(a, b), [a, b], seed=29)


class TestBackwardContract:
    def test_sum_of_product_grad_is_other_factor(self):
        x = Tensor(np.array([1.0, 2.0, 3.0], np.float32))
        w = Tensor(np.array([0.5, -1.0, 2.0], np.float32), requires_grad=True)
        tape = Tape()
        with record_on(tape):
            loss = sum_all(ew_mul(w, x))
        backward(tape, loss)
        np.testing.assert_array_equal(w.grad, x.data)

    def test_disconnected_parameter_zero_grad(self):
        w = Tensor(np.ones(3, np.float32), requires_grad=True)
        unused = Tensor(np.ones(4, np.float32), requires_grad=True)
        tape = Tape()
        with record_on(tape):
            loss = sum_all(w)
        backward(tape, loss)
        assert unused.grad is None  # read as zero by the optimizer

    def test_backward_on_non_scalar_rejected(self):
        w = Tensor(np.ones(3, np.float32), requires_grad=True)
        tape = Tape()
        with record_on(tape):
            out = relu(w)
        with pytest.raises(ShapeError, match="scalar"):
            backward(tape, out)

    def test_reused_tensor_accumulates(self):
        w = Tensor(np.array([2.0], np.float32), requires_grad=True)
        tape = Tape()
        with record_on(tape):
            loss = sum_all(ew_mul(w, w))
        backward(tape, loss)
        np.testing.assert_allclose(w.grad, [4.0])

    def test_no_recording_without_tape(self):
        w = Tensor(np.ones(3, np.float32), requires_grad=True)
        out = relu(w)
        assert not out.requires_grad


class TestSGD:
    def test_zero_grad_zero_momentum_no_wd_unchanged(self):
        p = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
        opt = optim.SGD([("p", p)], momentum=0.9, weight_decay=0.0)
        opt.step(lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_single_step_plain_gradient(self):
        p = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
        p.grad = np.array([0.5, -0.5], np.float32)
        opt = optim.SGD([("p", p)], momentum=0.9, weight_decay=0.0)
        opt.step(lr=0.1)
        np.testing.assert_allclose(p.data, [0.95, 2.05], rtol=1e-6)

    def test_two_steps_constant_gradient_recursion(self):
        p = Tensor(np.zeros(1, np.float32), requires_grad=True)
        g = np.array([1.0], np.float32)
        opt = optim.SGD([("p", p)], momentum=0.9, weight_decay=0.0)
        p.grad = g.copy()
        opt.step(lr=0.1)
        first = p.data.copy()
        p.grad = g.copy()
        opt.step(lr=0.1)
        # second-step delta is -lr*(1+momentum)*g; cumulative -lr*2.9*g
        np.testing.assert_allclose(p.data - first, [-0.1 * 1.9], rtol=1e-5)
        np.testing.assert_allclose(p.data, [-0.1 * 2.9], rtol=1e-5)

    def test_weight_decay_applies_without_gradient(self):
        p = Tensor(np.array([10.0], np.float32), requires_grad=True)
        opt = optim.SGD([("p", p)], momentum=0.0, weight_decay=0.1)
        opt.step(lr=0.5)
        np.testing.assert_allclose(p.data, [10.0 - 0.5 * 0.1 * 10.0], rtol=1e-6)


class TestLrSchedule:
    def test_paper_schedule_values(self):
        assert optim.lr_at_epoch(0) == pytest.approx(0.1)
        assert optim.lr_at_epoch(59) == pytest.approx(0.1)
        assert optim.lr_at_epoch(60) == pytest.approx(0.02)
        assert optim.lr_at_epoch(119) == pytest.approx(0.02)
        assert optim.lr_at_epoch(120) == pytest.approx(0.004)
        assert optim.lr_at_epoch(199) == pytest.approx(0.1 * 0.2 ** 3)

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            optim.lr_at_epoch(-1)
