"""Deterministic tensor/layer/optimizer kernel with exact analytic gradients.

Layers operate on channels-last numpy arrays: convolutional inputs are
(N, H, W, C), dense inputs (N, F). Forward passes never mutate layer state
(inference is safe to share across threads); train-mode passes return an
explicit cache consumed by the matching backward.

Parameters and activations are float32 in production; every routine is
dtype-generic so gradient checks can run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DegenerateBatchError,
    NumericError,
    ParameterError,
    ShapeError,
)

KERNEL_SIZE = 2
WEIGHT_INIT_BOUND = 0.1065
PRED_CLIP = 1e-7

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_uniform(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    """Weight draw on [-WEIGHT_INIT_BOUND, WEIGHT_INIT_BOUND], i.i.d. uniform."""
    return rng.uniform(-WEIGHT_INIT_BOUND, WEIGHT_INIT_BOUND, size=shape).astype(dtype)


class ConvLayer:
    """Valid 2x2 convolution, stride 1, linear or tanh activation.

    kernel is (out_ch, in_ch, 2, 2); forward maps (N, H, W, in_ch) to
    (N, H-1, W-1, out_ch).
    """

    def __init__(self, kernel: np.ndarray, bias: np.ndarray, activation: str):
        if activation not in ("linear", "tanh"):
            raise ParameterError(f"conv activation {activation!r} not supported")
        if kernel.ndim != 4 or kernel.shape[2:] != (KERNEL_SIZE, KERNEL_SIZE):
            raise ShapeError(f"kernel shape {kernel.shape} must be (out, in, 2, 2)")
        self.kernel = kernel
        self.bias = bias
        self.activation = activation

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4:
            raise ShapeError(f"conv input must be (N, H, W, C), got {x.shape}")
        if x.shape[1] < KERNEL_SIZE or x.shape[2] < KERNEL_SIZE:
            raise ShapeError(f"conv input spatial dims too small: {x.shape}")
        if x.shape[3] != self.in_channels:
            raise ShapeError(
                f"conv expects {self.in_channels} channels, got {x.shape[3]}"
            )

    def _kernel_matrix(self) -> np.ndarray:
        # (out, in, kh, kw) -> (kh*kw*in, out), row order (kh, kw, in)
        return self.kernel.transpose(2, 3, 1, 0).reshape(-1, self.out_channels)

    @staticmethod
    def _im2col(x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        ho, wo = h - 1, w - 1
        cols = np.empty((n, ho, wo, KERNEL_SIZE * KERNEL_SIZE * c), dtype=x.dtype)
        k = 0
        for di in range(KERNEL_SIZE):
            for dj in range(KERNEL_SIZE):
                cols[..., k * c:(k + 1) * c] = x[:, di:di + ho, dj:dj + wo, :]
                k += 1
        return cols.reshape(n * ho * wo, -1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_train(x)
        return y

    def forward_train(self, x: np.ndarray):
        self._check_input(x)
        n, h, w, _ = x.shape
        ho, wo = h - 1, w - 1
        cols = self._im2col(x)
        z = cols @ self._kernel_matrix() + self.bias
        z = z.reshape(n, ho, wo, self.out_channels)
        if self.activation == "tanh":
            a = np.tanh(z)
            return a, (x.shape, cols, a)
        return z, (x.shape, cols, None)

    def backward(self, dout: np.ndarray, cache):
        x_shape, cols, a = cache
        n, h, w, c = x_shape
        ho, wo = h - 1, w - 1
        if self.activation == "tanh":
            dz = dout * (1.0 - a * a)
        else:
            dz = dout
        dz_mat = dz.reshape(n * ho * wo, self.out_channels)
        dbias = dz_mat.sum(axis=0)
        dw_mat = cols.T @ dz_mat
        dkernel = dw_mat.reshape(KERNEL_SIZE, KERNEL_SIZE, c, self.out_channels)
        dkernel = dkernel.transpose(3, 2, 0, 1)
        dcols = (dz_mat @ self._kernel_matrix().T).reshape(
            n, ho, wo, KERNEL_SIZE * KERNEL_SIZE * c
        )
        dx = np.zeros(x_shape, dtype=dout.dtype)
        k = 0
        for di in range(KERNEL_SIZE):
            for dj in range(KERNEL_SIZE):
                dx[:, di:di + ho, dj:dj + wo, :] += dcols[..., k * c:(k + 1) * c]
                k += 1
        return dx, dkernel, dbias


class DenseLayer:
    """Fully connected layer: out = act(x @ W.T + b), W is (out, in)."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str):
        if activation not in ("tanh", "sigmoid", "linear"):
            raise ParameterError(f"dense activation {activation!r} not supported")
        self.weights = weights
        self.bias = bias
        self.activation = activation

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.weights.shape[1]:
            raise ShapeError(
                f"dense expects (N, {self.weights.shape[1]}), got {x.shape}"
            )

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_train(x)
        return y

    def forward_train(self, x: np.ndarray):
        self._check_input(x)
        z = x @ self.weights.T + self.bias
        if self.activation == "tanh":
            a = np.tanh(z)
        elif self.activation == "sigmoid":
            a = sigmoid(z)
        else:
            a = z
        return a, (x, a)

    def backward(self, dout: np.ndarray, cache):
        x, a = cache
        if self.activation == "tanh":
            dz = dout * (1.0 - a * a)
        elif self.activation == "sigmoid":
            dz = dout * a * (1.0 - a)
        else:
            dz = dout
        dweights = dz.T @ x
        dbias = dz.sum(axis=0)
        dx = dz @ self.weights
        return dx, dweights, dbias


class BatchNorm:
    """Per-channel batch normalization over the trailing axis.

    Train mode normalizes with batch statistics and nudges the moving
    statistics by exponential momentum; inference uses the moving
    statistics only.
    """

    def __init__(self, gamma: np.ndarray, beta: np.ndarray,
                 moving_mean: np.ndarray, moving_var: np.ndarray,
                 epsilon: float = BN_EPSILON, momentum: float = BN_MOMENTUM):
        self.gamma = gamma
        self.beta = beta
        self.moving_mean = moving_mean
        self.moving_var = moving_var
        self.epsilon = epsilon
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def _check_input(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.channels:
            raise ShapeError(
                f"batch norm expects {self.channels} channels, got {x.shape[-1]}"
            )

    def forward_infer(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        dt = x.dtype
        scale = (self.gamma / np.sqrt(self.moving_var + self.epsilon)).astype(dt)
        shift = (self.beta - self.moving_mean * scale).astype(dt)
        return x * scale + shift

    def forward_train(self, x: np.ndarray, update_running: bool = True):
        self._check_input(x)
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                f"train-mode batch norm needs batch size >= 2, got {x.shape[0]}"
            )
        flat = x.reshape(-1, self.channels)
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + np.asarray(self.epsilon, dtype=x.dtype))
        xhat = (flat - mean) * inv_std
        y = (xhat * self.gamma + self.beta).reshape(x.shape)
        if update_running:
            m = self.momentum
            dt = self.moving_mean.dtype
            self.moving_mean = (m * self.moving_mean + (1.0 - m) * mean).astype(dt)
            self.moving_var = (m * self.moving_var + (1.0 - m) * var).astype(dt)
        return y, (xhat, inv_std, x.shape)

    def backward(self, dout: np.ndarray, cache):
        xhat, inv_std, shape = cache
        dflat = dout.reshape(-1, self.channels)
        m = dflat.shape[0]
        dgamma = (dflat * xhat).sum(axis=0)
        dbeta = dflat.sum(axis=0)
        dxhat = dflat * self.gamma
        dx = (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
        return dx.reshape(shape), dgamma, dbeta


def dropout(x: np.ndarray, rate: float, rng: Optional[np.random.Generator],
            train: bool):
    """Inverted dropout: kept units scaled by 1/(1-rate). Returns (y, mask).

    Inference mode (and rate 0) is the identity with mask None.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    mask = keep / np.asarray(1.0 - rate, dtype=x.dtype)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return dout
    return dout * mask


def bce_loss(y_true: np.ndarray, y_pred: np.ndarray):
    """Mean binary cross-entropy with predictions clipped to [1e-7, 1-1e-7].

    Returns (value, gradient w.r.t. predictions). The value is accumulated
    in float64 regardless of input dtype.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ShapeError(
            f"label/prediction length mismatch: {y_true.shape} vs {y_pred.shape}"
        )
    n = y_true.size
    p = np.clip(y_pred, PRED_CLIP, 1.0 - PRED_CLIP)
    p64 = p.astype(np.float64)
    y64 = y_true.astype(np.float64)
    value = -np.mean(y64 * np.log(p64) + (1.0 - y64) * np.log1p(-p64))
    grad = ((p - y_true.astype(p.dtype)) / (p * (1.0 - p))) / np.asarray(
        n, dtype=p.dtype
    )
    return float(value), grad


@dataclass
class AdamState:
    """First/second moment estimates for a flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    learning_rate: float = 1e-4

    @classmethod
    def for_size(cls, n: int, learning_rate: float = 1e-4,
                 dtype=np.float32) -> "AdamState":
        return cls(m=np.zeros(n, dtype=dtype), v=np.zeros(n, dtype=dtype),
                   learning_rate=learning_rate)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; params and state updated in place."""
    if params.shape != grads.shape:
        raise ShapeError(f"param/grad shape mismatch: {params.shape} vs {grads.shape}")
    finite = np.isfinite(grads)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise NumericError(f"non-finite gradient at parameter index {idx}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m += (1.0 - b1) * (grads - state.m)
    state.v += (1.0 - b2) * (grads * grads - state.v)
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    params -= (state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)).astype(
        params.dtype
    )
    return params


def finite_difference(f, arrays, step: float = 1e-4):
    """Central finite differences of scalar f() w.r.t. each array, in place.

    f must re-read the arrays on every call; arrays are restored afterwards.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ParameterError(f"step must be in [1e-6, 1e-3], got {step}")
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Worst-case |a - n| / max(|a|, |n|, floor) over paired gradient arrays."""
    worst = 0.0
    for a, nmr in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        nmr = np.asarray(nmr, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(nmr)), floor)
        worst = max(worst, float(np.max(np.abs(a - nmr) / denom)))
    return worst


def grad_check(f, arrays, analytic, step: float = 1e-4) -> float:
    """Compare analytic gradients against central differences of scalar f."""
    numeric = finite_difference(f, arrays, step=step)
    return max_relative_error(analytic, numeric)
