"""Layer forward/backward passes: dilated 3x3 and 1x1 convolution, instance
normalization, the normalization-skip block, ReLU, inverted dropout, channel
concatenation, and channelwise softmax.

All functions are pure maps over C x H x W arrays (plus an explicit RNG for
dropout). Convolutions use "same" zero padding of width equal to the
dilation rate, so spatial size is preserved everywhere. The heavy lifting is
lowered to one matrix product per convolution (patch matrix against the
flattened kernel); results match a direct nested-loop convolution to 1e-6.

Backward passes take the forward inputs and recompute cheap intermediates
(statistics, masks) rather than relying on hidden state, so each one is an
exact, self-contained gradient of its forward map. Everything works in
float64 as well, which is what the gradient checker uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass
class ConvParams:
    """Weights OC x IC x K x K, optional bias (length OC), dilation rate.

    Layers followed by a normalization carry no bias (the shift parameter
    of the normalization plays that role); `bias` is None there.
    """

    weights: np.ndarray
    bias: np.ndarray | None = None
    dilation: int = 1


@dataclass
class NormParams:
    """Per-channel scale/shift for instance normalization.

    `running_mean` and `running_var` are per-channel statistics slots kept
    for parameter accounting and checkpoint layout; normalization always
    uses the current input's own statistics, so the forward pass never
    reads them.
    """

    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None


def _check_conv(x: np.ndarray, p: ConvParams, kernel: int) -> None:
    if x.ndim != 3:
        raise ShapeError(f"expected C x H x W input, got shape {x.shape}")
    oc, ic, kh, kw = p.weights.shape
    if kh != kernel or kw != kernel:
        raise ParameterError(f"expected {kernel}x{kernel} kernel, got {kh}x{kw}")
    if x.shape[0] != ic:
        raise ShapeError(f"input has {x.shape[0]} channels, weights expect {ic}")
    if p.bias is not None and p.bias.shape != (oc,):
        raise ShapeError(f"bias shape {p.bias.shape} does not match {oc} output channels")
    if p.dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {p.dilation}")


def _conv_columns(x: np.ndarray, dilation: int) -> np.ndarray:
    """Patch matrix (IC*9, H*W) of a zero-padded dilated 3x3 neighborhood."""
    ic, h, w = x.shape
    d = dilation
    xp = np.pad(x, ((0, 0), (d, d), (d, d)))
    cols = np.empty((ic, 9, h, w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky * 3 + kx] = xp[:, ky * d : ky * d + h, kx * d : kx * d + w]
    return cols.reshape(ic * 9, h * w)


def dilated_conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Dilated 3x3 convolution with "same" zero padding of width D.

    out[o,y,x] = bias[o] + sum_{i,ky,kx} w[o,i,ky,kx] * pad(x)[i, y+D*ky, x+D*kx]
    """
    _check_conv(x, p, kernel=3)
    oc = p.weights.shape[0]
    _, h, w = x.shape
    cols = _conv_columns(x, p.dilation)
    out = (p.weights.reshape(oc, -1) @ cols).reshape(oc, h, w)
    if p.bias is not None:
        out = out + p.bias[:, None, None]
    return out


def dilated_conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Gradients (grad_x, grad_w, grad_b) of the dilated convolution.

    grad_b is None when the layer has no bias.
    """
    _check_conv(x, p, kernel=3)
    oc = p.weights.shape[0]
    ic, h, w = x.shape
    if grad_out.shape != (oc, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match output ({oc},{h},{w})")
    d = p.dilation
    cols = _conv_columns(x, p.dilation)
    g = grad_out.reshape(oc, h * w)
    grad_w = (g @ cols.T).reshape(p.weights.shape)
    grad_b = grad_out.sum(axis=(1, 2)) if p.bias is not None else None
    gcols = (p.weights.reshape(oc, -1).T @ g).reshape(ic, 9, h, w)
    gxp = np.zeros((ic, h + 2 * d, w + 2 * d), dtype=gcols.dtype)
    for ky in range(3):
        for kx in range(3):
            gxp[:, ky * d : ky * d + h, kx * d : kx * d + w] += gcols[:, ky * 3 + kx]
    grad_x = gxp[:, d : d + h, d : d + w]
    return grad_x, grad_w, grad_b


def conv1x1_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """1x1 convolution: a per-pixel affine map across channels."""
    _check_conv(x, p, kernel=1)
    oc = p.weights.shape[0]
    ic, h, w = x.shape
    out = (p.weights.reshape(oc, ic) @ x.reshape(ic, h * w)).reshape(oc, h, w)
    if p.bias is not None:
        out = out + p.bias[:, None, None]
    return out


def conv1x1_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    _check_conv(x, p, kernel=1)
    oc = p.weights.shape[0]
    ic, h, w = x.shape
    if grad_out.shape != (oc, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match output ({oc},{h},{w})")
    g = grad_out.reshape(oc, h * w)
    xm = x.reshape(ic, h * w)
    grad_w = (g @ xm.T).reshape(p.weights.shape)
    grad_b = grad_out.sum(axis=(1, 2)) if p.bias is not None else None
    grad_x = (p.weights.reshape(oc, ic).T @ g).reshape(ic, h, w)
    return grad_x, grad_w, grad_b


def _norm_stats(x: np.ndarray, eps: float):
    mean = x.mean(axis=(1, 2))
    var = x.var(axis=(1, 2))  # population variance, divisor H*W
    inv_std = 1.0 / np.sqrt(var + eps)
    return mean, inv_std


def instance_norm_forward(x: np.ndarray, p: NormParams) -> np.ndarray:
    """Normalize each channel by its own spatial mean/variance, then scale
    and shift. Uses the current input's statistics regardless of mode, so
    training and inference behave identically."""
    if x.ndim != 3:
        raise ShapeError(f"expected C x H x W input, got shape {x.shape}")
    if p.gamma.shape != (x.shape[0],) or p.beta.shape != (x.shape[0],):
        raise ShapeError(f"gamma/beta must have length {x.shape[0]}")
    mean, inv_std = _norm_stats(x, p.eps)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    return p.gamma[:, None, None] * xhat + p.beta[:, None, None]


def instance_norm_backward(x: np.ndarray, p: NormParams, grad_out: np.ndarray):
    """Exact gradient through the per-channel mean and variance."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input {x.shape}")
    mean, inv_std = _norm_stats(x, p.eps)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    grad_beta = grad_out.sum(axis=(1, 2))
    grad_gamma = (grad_out * xhat).sum(axis=(1, 2))
    g_mean = grad_out.mean(axis=(1, 2), keepdims=True)
    gx_mean = (grad_out * xhat).mean(axis=(1, 2), keepdims=True)
    scale = (p.gamma * inv_std)[:, None, None]
    grad_x = scale * (grad_out - g_mean - xhat * gx_mean)
    return grad_x, grad_gamma, grad_beta


def norm_skip_block_forward(x_conv: np.ndarray, p: NormParams) -> np.ndarray:
    """relu(x + instance_norm(x)): the post-convolution block.

    Adding the normalized activations back onto the raw ones keeps the mean
    information the normalization would otherwise remove, while still
    softening contrast variation before the ReLU.
    """
    s = x_conv + instance_norm_forward(x_conv, p)
    return np.maximum(s, 0)


def norm_skip_block_backward(x_conv: np.ndarray, p: NormParams, grad_out: np.ndarray):
    s = x_conv + instance_norm_forward(x_conv, p)
    ds = grad_out * (s > 0)
    grad_norm_x, grad_gamma, grad_beta = instance_norm_backward(x_conv, p, ds)
    return ds + grad_norm_x, grad_gamma, grad_beta


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return grad_out * (x > 0)


def dropout_forward(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout: survivors scaled by 1/(1-rate) so eval is a no-op.

    Returns (y, keep_mask); the mask is all-True outside train mode.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    if rng is None:
        raise ParameterError("train-mode dropout requires an RNG")
    keep = rng.random(x.shape) >= rate
    return x * keep / (1.0 - rate), keep


def dropout_backward(keep: np.ndarray, rate: float, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * keep / (1.0 - rate)


def concat_channels(parts) -> np.ndarray:
    """Stack C_i x H x W tensors along the channel axis, in argument order."""
    parts = list(parts)
    if not parts:
        raise ShapeError("cannot concatenate an empty list")
    h, w = parts[0].shape[1:]
    for t in parts:
        if t.ndim != 3 or t.shape[1:] != (h, w):
            raise ShapeError(f"spatial size {t.shape[1:]} differs from {(h, w)}")
    return np.concatenate(parts, axis=0)


def split_channels(t: np.ndarray, sizes) -> list:
    """Inverse of concat_channels: slice back into the given channel counts."""
    if sum(sizes) != t.shape[0]:
        raise ShapeError(f"channel sizes {list(sizes)} do not sum to {t.shape[0]}")
    return np.split(t, np.cumsum(sizes)[:-1], axis=0)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis, max-shifted for stability."""
    if x.ndim != 3:
        raise ShapeError(f"expected C x H x W input, got shape {x.shape}")
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Gradient with respect to the logits given probs = softmax(logits)."""
    dot = (grad_probs * probs).sum(axis=0, keepdims=True)
    return probs * (grad_probs - dot)


def log_softmax_channels(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
