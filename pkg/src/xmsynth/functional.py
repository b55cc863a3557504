"""Differentiable operations on :class:`~xmsynth.tensor.Tensor`.

Convolutions use an im2col layout: the padded input is transposed to
channels-last, viewed as ``(N, Ho, Wo, k, k, C)`` windows and contracted
against the weight with a single matmul. Transposed convolution is the
exact adjoint, built from the same window/scatter helpers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DegenerateStatisticsError, DimensionError, NumericError, ValidationError
from .tensor import Tensor, record


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(x: Tensor, op: str):
    if not np.isfinite(x.data).all():
        raise NumericError(f"{op}: non-finite values in input")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return record("scale", a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape),)

    return record("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# -- activations -------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    one = x.dtype.type(1)
    scale = np.where(x.data > 0, one, x.dtype.type(slope))
    return record("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, mode: str, slope: float = 0.2) -> Tensor:
    """Apply ``relu``, ``leaky_relu``, ``tanh`` or ``sigmoid`` elementwise."""
    if mode == "relu":
        return relu(x)
    if mode == "leaky_relu":
        return leaky_relu(x, slope)
    if mode == "tanh":
        return tanh(x)
    if mode == "sigmoid":
        return sigmoid(x)
    raise ValidationError(f"unknown activation {mode!r}")


# -- dense and structural ------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match {weight.shape[1]} outputs")
    _check_finite(x, "linear")
    out = x.data @ weight.data
    if bias is not None:
        out += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return record("linear", out, inputs, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels: {a.shape} and {b.shape} differ outside the channel axis")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# -- convolution -----------------------------------------------------------


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _windows(xh: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Strided ``(N, Ho, Wo, k, k, C)`` view of a channels-last image."""
    n, _, _, c = xh.shape
    sn, sh, sw, sc = xh.strides
    return as_strided(xh, (n, ho, wo, k, k, c), (sn, sh * s, sw * s, sh, sw, sc), writeable=False)


def _scatter(cols: np.ndarray, padded_shape: tuple, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum ``(N, Ho, Wo, k, k, C)`` patches into an image."""
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + s * ho : s, j : j + s * wo : s, :] += cols[:, :, :, i, j, :]
    return out


def _to_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    xh = x.transpose(0, 2, 3, 1)
    if p == 0:
        return np.ascontiguousarray(xh)
    return np.pad(xh, ((0, 0), (p, p), (p, p), (0, 0)))


def _to_nchw(xh: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(xh.transpose(0, 3, 1, 2))


def _check_conv_args(op, x, weight, bias, stride, padding, cin_axis):
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"{op}: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    k = weight.shape[2]
    if k < 1 or weight.shape[3] != k:
        raise DimensionError(f"{op}: kernel must be square and non-empty, got {weight.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ValidationError(f"{op}: stride must be >= 1 and padding >= 0")
    if weight.shape[cin_axis] != x.shape[1]:
        raise DimensionError(f"{op}: weight expects {weight.shape[cin_axis]} input channels, input has {x.shape[1]}")
    if bias is not None:
        cout = weight.shape[1 - cin_axis]
        if bias.shape != (cout,):
            raise DimensionError(f"{op}: bias {bias.shape} does not match {cout} output channels")
    _check_finite(x, op)
    return k


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, k, k)."""
    k = _check_conv_args("conv2d", x, weight, bias, stride, padding, cin_axis=1)
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {k}")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    xh = _to_nhwc(x.data, padding)
    cols = _windows(xh, k, stride, ho, wo).reshape(n * ho * wo, k * k * cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = _to_nchw(out.reshape(n, ho, wo, cout))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, k, k, cin)
            gxh = _scatter(gcols, xh.shape, k, stride, ho, wo)
            gx = _to_nchw(gxh[:, padding : padding + h, padding : padding + w, :])
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return record("conv2d", out, inputs, backward)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution; ``weight`` is (Cin, Cout, k, k).

    Output spatial size is ``(H - 1) * stride - 2 * padding + k``.
    """
    k = _check_conv_args("conv_transpose2d", x, weight, bias, stride, padding, cin_axis=0)
    n, cin, h, w = x.shape
    cout = weight.shape[1]
    hp, wp = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d: padding {padding} leaves an empty output")
    xm = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cin, k * k * cout)
    cols = (xm @ wmat).reshape(n, h, w, k, k, cout)
    outh = _scatter(cols, (n, hp, wp, cout), k, stride, h, w)[:, padding : padding + ho, padding : padding + wo, :]
    if bias is not None:
        outh += bias.data
    out = _to_nchw(outh)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gcols = _windows(_to_nhwc(g, padding), k, stride, h, w).reshape(n * h * w, k * k * cout)
        gx = None
        if x.requires_grad:
            gx = _to_nchw((gcols @ wmat.T).reshape(n, h, w, cin))
        gw = None
        if weight.requires_grad:
            gw = (xm.T @ gcols).reshape(cin, k, k, cout).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv_transpose2d", out, inputs, backward)


# -- normalization -------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics, updated in place during training-mode calls."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), **kw)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool = True) -> Tensor:
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    c = x.shape[1]
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    eps = state.eps
    if training:
        m = x.size // c
        if m < 2:
            raise DegenerateStatisticsError(
                f"batchnorm2d: {m} value per channel in training mode; need N*H*W >= 2"
            )
        mu = x.data.mean(axis=axes)
        centered = x.data - mu.reshape(bshape)
        var = np.mean(centered * centered, axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(bshape)
        mom = state.momentum
        state.running_mean *= 1.0 - mom
        state.running_mean += mom * mu
        state.running_var *= 1.0 - mom
        state.running_var += mom * var * (m / (m - 1))
    else:
        m = None
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                gx = (inv_std / m).reshape(bshape) * (
                    m * gxhat
                    - gxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return record("batchnorm2d", out, (x, gamma, beta), backward)


# -- losses ------------------------------------------------------------------


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _target_array(target, like: Tensor) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=like.dtype)
    if t.ndim == 0:
        t = np.full(like.shape, t, dtype=like.dtype)
    return t


def loss_bce_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``target``.

    Uses ``max(x, 0) - x*t + log1p(exp(-|x|))`` so any finite logit gives a
    finite loss. ``target`` may be a scalar label broadcast to every patch.
    """
    t = _target_array(target, logits)
    _check_same_shape("loss_bce_logits", logits, t)
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValidationError("loss_bce_logits: targets must lie in [0, 1]")
    x = logits.data
    n = x.size
    loss = np.mean(np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * (sig - t) / n,)

    return record("loss_bce_logits", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def loss_l1(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    _check_same_shape("loss_l1", a, b)
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)

    def backward(g):
        ga = g * sign / n
        return ga, -ga

    return record("loss_l1", np.asarray(np.abs(diff).mean(), dtype=a.dtype), (a, b), backward)


def loss_mse(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    _check_same_shape("loss_mse", a, b)
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return record("loss_mse", np.asarray(np.mean(diff * diff), dtype=a.dtype), (a, b), backward)
