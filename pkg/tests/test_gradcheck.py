"""Finite-difference checks for every differentiable op.

All checks run in fp64 with central differences (h=1e-5); random inputs
avoid non-smooth points (leaky-relu kink, maxpool ties, clamp floors).
"""

import numpy as np
import pytest

from irstkit.tensor import (
    BatchNormParams,
    ConvParams,
    Tensor,
    axis_mean,
    batch_norm,
    channel_slice,
    clamp_min,
    concat_channels,
    conv2d,
    leaky_relu,
    maxpool2,
    sigmoid,
    soft_iou_loss,
    sqrt,
    tanh,
    tsum,
    upsample,
)

from helpers import check_grad

RNG = np.random.default_rng(2024)


def _leaf(shape, rng, away_from_zero=False, positive=False, scale=1.0):
    v = rng.standard_normal(shape) * scale
    if away_from_zero:
        v = np.where(np.abs(v) < 0.1, v + np.sign(v + 1e-12) * 0.2, v)
    if positive:
        v = np.abs(v) + 0.5
    return Tensor(v, requires_grad=True)


def _weighted(out, weight):
    return tsum(out * weight)


def test_grad_conv2d():
    rng = np.random.default_rng(0)
    x = _leaf((1, 3, 6, 6), rng)
    w = _leaf((2, 3, 3, 3), rng)
    b = _leaf((1, 2, 1, 1), rng)
    cw = Tensor(rng.standard_normal((1, 2, 6, 6)))
    p = ConvParams(weight=w, bias=b, stride=1, padding=1)
    check_grad(lambda: _weighted(conv2d(x, p), cw), [x, w, b], rng)


def test_grad_conv2d_strided():
    rng = np.random.default_rng(1)
    x = _leaf((2, 2, 7, 7), rng)
    w = _leaf((2, 2, 3, 3), rng)
    b = _leaf((1, 2, 1, 1), rng)
    cw = Tensor(rng.standard_normal((2, 2, 4, 4)))
    p = ConvParams(weight=w, bias=b, stride=2, padding=1)
    check_grad(lambda: _weighted(conv2d(x, p), cw), [x, w, b], rng)


def test_grad_batch_norm_train():
    rng = np.random.default_rng(2)
    x = _leaf((3, 2, 4, 4), rng)
    p = BatchNormParams.create(2, dtype=np.float64)
    p.gamma.values[:] = rng.standard_normal((1, 2, 1, 1))
    p.beta.values[:] = rng.standard_normal((1, 2, 1, 1))
    cw = Tensor(rng.standard_normal((3, 2, 4, 4)))

    def build():
        p.mode = "train"
        snap_m, snap_v = p.running_mean.copy(), p.running_var.copy()
        out = _weighted(batch_norm(x, p), cw)
        p.running_mean, p.running_var = snap_m, snap_v  # keep f() state-free
        return out

    check_grad(build, [x, p.gamma, p.beta], rng)


def test_grad_batch_norm_eval():
    rng = np.random.default_rng(3)
    x = _leaf((2, 2, 4, 4), rng)
    p = BatchNormParams.create(2, dtype=np.float64)
    batch_norm(Tensor(rng.standard_normal((4, 2, 4, 4))), p)
    p.mode = "eval"
    cw = Tensor(rng.standard_normal((2, 2, 4, 4)))
    check_grad(lambda: _weighted(batch_norm(x, p), cw), [x, p.gamma, p.beta], rng)


@pytest.mark.parametrize("op", [leaky_relu, tanh, sigmoid])
def test_grad_unary(op):
    rng = np.random.default_rng(4)
    x = _leaf((1, 4, 8, 8), rng, away_from_zero=True)
    cw = Tensor(rng.standard_normal((1, 4, 8, 8)))
    check_grad(lambda: _weighted(op(x), cw), [x], rng)


def test_grad_sqrt_and_clamp():
    rng = np.random.default_rng(5)
    x = _leaf((1, 2, 4, 4), rng, positive=True)
    cw = Tensor(rng.standard_normal((1, 2, 4, 4)))
    check_grad(lambda: _weighted(sqrt(x), cw), [x], rng)
    check_grad(lambda: _weighted(clamp_min(x, 0.01), cw), [x], rng)


def test_grad_binary_broadcast():
    rng = np.random.default_rng(6)
    a = _leaf((1, 3, 4, 1), rng)
    b = _leaf((1, 3, 1, 5), rng, away_from_zero=True)
    cw = Tensor(rng.standard_normal((1, 3, 4, 5)))
    check_grad(lambda: _weighted(a * b, cw), [a, b], rng)
    check_grad(lambda: _weighted(a + b, cw), [a, b], rng)
    check_grad(lambda: _weighted(a - b, cw), [a, b], rng)
    check_grad(lambda: _weighted(a / b, cw), [a, b], rng)


def test_grad_broadcast_mul_matches_fd_tightly():
    rng = np.random.default_rng(7)
    a = _leaf((2, 2, 4, 1), rng)
    b = _leaf((2, 2, 1, 4), rng)
    cw = Tensor(rng.standard_normal((2, 2, 4, 4)))
    worst = check_grad(lambda: _weighted(a * b, cw), [a, b], rng, samples_per_tensor=8)
    assert worst < 1e-4


@pytest.mark.parametrize("axis", ["height", "width", "spatial"])
def test_grad_axis_mean(axis):
    rng = np.random.default_rng(8)
    x = _leaf((2, 3, 4, 5), rng)
    out_shape = axis_mean(Tensor(x.values), axis).shape
    cw = Tensor(rng.standard_normal(out_shape))
    check_grad(lambda: _weighted(axis_mean(x, axis), cw), [x], rng)


def test_grad_concat_slice():
    rng = np.random.default_rng(9)
    a = _leaf((1, 2, 3, 3), rng)
    b = _leaf((1, 2, 3, 3), rng)
    cw = Tensor(rng.standard_normal((1, 4, 3, 3)))
    check_grad(lambda: _weighted(concat_channels(a, b), cw), [a, b], rng)
    cw2 = Tensor(rng.standard_normal((1, 1, 3, 3)))
    check_grad(lambda: _weighted(channel_slice(a, 1, 2), cw2), [a], rng)


@pytest.mark.parametrize("mode", ["bilinear", "nearest"])
def test_grad_upsample(mode):
    rng = np.random.default_rng(10)
    x = _leaf((1, 2, 4, 4), rng)
    cw = Tensor(rng.standard_normal((1, 2, 8, 8)))
    check_grad(lambda: _weighted(upsample(x, mode), cw), [x], rng)


def test_grad_maxpool():
    rng = np.random.default_rng(11)
    # spread values far apart so finite differences never flip the argmax
    v = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)
    x = Tensor(v, requires_grad=True)
    cw = Tensor(rng.standard_normal((1, 1, 4, 4)))
    check_grad(lambda: _weighted(maxpool2(x), cw), [x], rng)


def test_grad_soft_iou():
    rng = np.random.default_rng(12)
    pred = Tensor(rng.uniform(0.05, 0.95, size=(1, 1, 6, 6)), requires_grad=True)
    target = Tensor((rng.random((1, 1, 6, 6)) > 0.5).astype(np.float64))
    check_grad(lambda: soft_iou_loss(pred, target), [pred], rng, samples_per_tensor=8)
