"""Analytic gradients vs central finite differences, in float64."""

import numpy as np
import pytest

from builtup.model import ArchitectureConfig, build_model
from builtup.nncore import (
    BatchNorm,
    ConvLayer,
    DenseLayer,
    bce_loss,
    grad_check,
    init_uniform,
    max_relative_error,
    finite_difference,
)

SEEDS = list(range(20))

TINY_ARCH = ArchitectureConfig(bands=3, block_filters=(3, 4), hidden_units=5,
                               dropout_rate=0.1)


def projection_loss(out, weights):
    """Fixed random projection makes a scalar objective out of any output."""
    return float(np.sum(out * weights))


def check_conv(seed, activation):
    rng = np.random.default_rng(seed)
    layer = ConvLayer(init_uniform(rng, (4, 2, 2, 2), np.float64),
                      init_uniform(rng, (4,), np.float64), activation)
    x = rng.random((3, 3, 3, 2))
    proj = rng.standard_normal((3, 2, 2, 4))

    out, cache = layer.forward_train(x)
    dx, dk, db = layer.backward(proj, cache)

    def f():
        return projection_loss(layer.forward(x), proj)

    err_params = grad_check(f, [layer.kernel, layer.bias], [dk, db])
    err_input = grad_check(f, [x], [dx])
    return max(err_params, err_input)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_linear_gradients_near_exact(seed):
    # linear map: central differences are exact up to rounding
    assert check_conv(seed, "linear") < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_tanh_gradients(seed):
    assert check_conv(seed, "tanh") < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradients(seed):
    rng = np.random.default_rng(seed + 100)
    layer = DenseLayer(init_uniform(rng, (3, 8), np.float64),
                       init_uniform(rng, (3,), np.float64), "tanh")
    x = rng.random((4, 8))
    proj = rng.standard_normal((4, 3))
    _, cache = layer.forward_train(x)
    dx, dw, db = layer.backward(proj, cache)

    def f():
        return projection_loss(layer.forward(x), proj)

    assert grad_check(f, [layer.weights, layer.bias, x], [dw, db, dx]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_sigmoid_dense_gradients(seed):
    rng = np.random.default_rng(seed + 200)
    layer = DenseLayer(init_uniform(rng, (1, 6), np.float64),
                       init_uniform(rng, (1,), np.float64), "sigmoid")
    x = rng.random((5, 6))
    proj = rng.standard_normal((5, 1))
    _, cache = layer.forward_train(x)
    dx, dw, db = layer.backward(proj, cache)

    def f():
        return projection_loss(layer.forward(x), proj)

    assert grad_check(f, [layer.weights, layer.bias, x], [dw, db, dx]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_train_gradients(seed):
    rng = np.random.default_rng(seed + 300)
    ch = 3
    bn = BatchNorm(rng.random(ch) + 0.5, rng.standard_normal(ch),
                   np.zeros(ch), np.ones(ch))
    x = rng.standard_normal((6, 2, 2, ch))
    proj = rng.standard_normal(x.shape)
    _, cache = bn.forward_train(x, update_running=False)
    dx, dgamma, dbeta = bn.backward(proj, cache)

    def f():
        y, _ = bn.forward_train(x, update_running=False)
        return projection_loss(y, proj)

    assert grad_check(f, [bn.gamma, bn.beta, x], [dgamma, dbeta, dx]) < 1e-4


def full_stack_error(seed):
    """BCE-through-the-whole-network check with a frozen dropout mask."""
    rng = np.random.default_rng(seed)
    net = build_model(TINY_ARCH, seed=seed).astype(np.float64)
    x = rng.random((4, 5, 5, 3))
    y = (rng.random(4) < 0.5).astype(np.float64)
    mask_seed = seed + 1

    def run():
        probs, caches = net.forward_train(
            x, np.random.default_rng(mask_seed), update_running=False
        )
        return probs, caches

    probs, caches = run()
    loss, dprobs = bce_loss(y, probs)
    grads = net.backward(dprobs, caches)

    def f():
        p, _ = run()
        val, _ = bce_loss(y, p)
        return val

    params = net.trainable_arrays()
    numeric = finite_difference(f, params)
    return max_relative_error(grads, numeric)


@pytest.mark.parametrize("seed", SEEDS[:8])
def test_full_stack_gradients(seed):
    assert full_stack_error(seed) < 1e-4
