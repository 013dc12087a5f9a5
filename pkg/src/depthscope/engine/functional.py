"""Stateless forward/backward kernels on NCHW numpy arrays.

Every function here takes plain ``np.ndarray`` tensors laid out as
(batch, channels, height, width).  Backward functions return gradients with
respect to each differentiable input; nothing is cached between calls, so the
module layer in :mod:`depthscope.engine.layers` is responsible for keeping
whatever the backward pass needs.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def _check_4d(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")


def conv_output_size(size: int, k: int, s: int = 1, p: int = 0, d: int = 1) -> int:
    """Spatial output length of a (possibly dilated/strided) convolution."""
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, d: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        r0 = i * d
        for j in range(kw):
            c0 = j * d
            cols[:, :, i, j] = xp[:, :, r0:r0 + s * (ho - 1) + 1:s, c0:c0 + s * (wo - 1) + 1:s]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(gcols: np.ndarray, padded_shape, kh: int, kw: int, s: int, d: int,
            ho: int, wo: int) -> np.ndarray:
    n, c = padded_shape[:2]
    gcols = gcols.reshape(n, c, kh, kw, ho, wo)
    gxp = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        r0 = i * d
        for j in range(kw):
            c0 = j * d
            gxp[:, :, r0:r0 + s * (ho - 1) + 1:s, c0:c0 + s * (wo - 1) + 1:s] += gcols[:, :, i, j]
    return gxp


def _conv_geometry(x_shape, w_shape, stride, padding, dilation):
    if len(w_shape) != 4:
        raise ShapeError(f"kernel must be 4-D (O, I, kH, kW), got {w_shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid conv params stride={stride} padding={padding} dilation={dilation}")
    n, c, h, w = x_shape
    o, i, kh, kw = w_shape
    if c != i:
        raise ShapeError(f"input has {c} channels but kernel expects {i}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel extent {dilation * (kh - 1) + 1}x{dilation * (kw - 1) + 1} does not fit "
            f"padded input {h + 2 * padding}x{w + 2 * padding}")
    return ho, wo


def conv2d_forward_cols(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """Convolution that also returns the im2col matrix for reuse in backward."""
    _check_4d(x)
    ho, wo = _conv_geometry(x.shape, weight.shape, stride, padding, dilation)
    o, _, kh, kw = weight.shape
    n = x.shape[0]
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.reshape(n, x.shape[1], -1)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    y = np.matmul(weight.reshape(o, -1), cols)
    if bias is not None:
        y += bias.reshape(1, o, 1)
    return y.reshape(n, o, ho, wo), cols


def conv2d_forward(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """Dilated 2-D cross-correlation with zero padding.

    Output shape is ``(N, O, floor((H + 2p - d(kH-1) - 1)/s) + 1, ...)``.
    """
    return conv2d_forward_cols(x, weight, bias, stride, padding, dilation)[0]


def conv2d_backward_cols(x_shape, cols, weight, grad_out, stride=1, padding=0, dilation=1,
                         need_input_grad=True):
    n, c, h, w = x_shape
    o, _, kh, kw = weight.shape
    ho, wo = grad_out.shape[2:]
    gy = grad_out.reshape(n, o, ho * wo)
    grad_bias = gy.sum(axis=(0, 2))
    grad_weight = np.einsum("nop,nkp->ok", gy, cols, optimize=True).reshape(weight.shape)
    grad_input = None
    if need_input_grad:
        gcols = np.matmul(weight.reshape(o, -1).T, gy)
        if kh == 1 and kw == 1 and stride == 1 and padding == 0:
            grad_input = gcols.reshape(x_shape)
        else:
            padded = (n, c, h + 2 * padding, w + 2 * padding)
            gxp = _col2im(gcols, padded, kh, kw, stride, dilation, ho, wo)
            grad_input = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
    return grad_input, grad_weight, grad_bias


def conv2d_backward(x, weight, grad_out, stride=1, padding=0, dilation=1):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    _check_4d(x)
    ho, wo = _conv_geometry(x.shape, weight.shape, stride, padding, dilation)
    expected = (x.shape[0], weight.shape[0], ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    _, cols = conv2d_forward_cols(x, weight, None, stride, padding, dilation)
    return conv2d_backward_cols(x.shape, cols, weight, grad_out, stride, padding, dilation)


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2d_forward(x, k, s, padding=0):
    """Max pooling; returns the pooled map and per-output argmax (window-local)."""
    _check_4d(x)
    n, c, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"pool window {k} larger than input {h}x{w} (padding {padding})")
    ho = conv_output_size(h, k, s, padding)
    wo = conv_output_size(w, k, s, padding)
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x
    windows = np.empty((k * k, n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            windows[i * k + j] = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    argmax = windows.argmax(axis=0)
    out = np.take_along_axis(windows, argmax[None], axis=0)[0]
    return out, argmax


def maxpool2d_backward(x_shape, argmax, grad_out, k, s, padding=0):
    n, c, h, w = x_shape
    ho, wo = grad_out.shape[2:]
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            routed = np.where(argmax == i * k + j, grad_out, 0)
            gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += routed
    return gxp[:, :, padding:padding + h, padding:padding + w]


def maxpool2d(x, k, s, padding=0):
    return maxpool2d_forward(x, k, s, padding)


def upsample_nearest(x, factor):
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(grad_out, factor):
    if factor == 1:
        return grad_out.copy()
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def global_avg_pool(x):
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape, grad_out):
    h, w = x_shape[2:]
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


# ---------------------------------------------------------------------------
# normalization and activations


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training,
                      eps=1e-5, momentum=0.1, update_stats=True):
    """Per-channel batch normalization.

    In training mode the batch statistics are used and, when ``update_stats``
    is set, ``running_mean``/``running_var`` are updated in place (the running
    variance tracks the unbiased estimate).  Returns ``(y, cache)``.
    """
    _check_4d(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have length {c}")
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    y = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    return y.astype(x.dtype, copy=False), (xhat, inv_std, training)


def batchnorm_backward(grad_out, gamma, cache):
    xhat, inv_std, training = cache
    c = grad_out.shape[1]
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    g = gamma.reshape(1, c, 1, 1) * inv_std.reshape(1, c, 1, 1)
    if not training:
        return grad_out * g, grad_gamma, grad_beta
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_input = g * (grad_out - (grad_beta / m).reshape(1, c, 1, 1)
                      - xhat * (grad_gamma / m).reshape(1, c, 1, 1))
    return grad_input, grad_gamma, grad_beta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0)


RRELU_LOWER = 1.0 / 8.0
RRELU_UPPER = 1.0 / 3.0


def rrelu_forward(x, training, rng=None, lower=RRELU_LOWER, upper=RRELU_UPPER):
    """Randomized leaky ReLU.  Returns ``(y, slope)`` where ``slope`` is the
    per-element multiplier applied (1 on the non-negative side)."""
    if not 0 < lower < upper < 1:
        raise ValueError(f"rrelu bounds must satisfy 0 < lower < upper < 1, got {lower}, {upper}")
    if training:
        if rng is None:
            raise ValueError("training-mode rrelu needs an rng")
        neg = rng.uniform(lower, upper, size=x.shape).astype(x.dtype, copy=False)
    else:
        neg = x.dtype.type((lower + upper) / 2)
    slope = np.where(x >= 0, x.dtype.type(1), neg)
    return x * slope, slope


def rrelu_backward(slope, grad_out):
    return grad_out * slope


# ---------------------------------------------------------------------------
# structural ops and loss


def concat_channels(inputs):
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate {t.shape} with {ref}: N/H/W differ")
    return np.concatenate(inputs, axis=1)


def split_channels(grad_out, channel_counts):
    bounds = np.cumsum(channel_counts)[:-1]
    return np.split(grad_out, bounds, axis=1)


def l2_loss(pred, target, mask):
    """Mean squared error over masked pixels and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    mask = mask.astype(bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("l2_loss: mask selects no pixels")
    diff = np.where(mask, pred - target, 0)
    loss = float((diff.astype(np.float64) ** 2).sum() / count)
    grad = (2.0 / count) * diff
    return loss, grad.astype(pred.dtype, copy=False)
