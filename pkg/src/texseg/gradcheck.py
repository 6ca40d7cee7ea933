"""Finite-difference verification of every backward pass.

Central differences in float64 with step 1e-4 are compared against the
analytic gradients, layer by layer and end to end through the full network
and loss. Layer checks normalize the error per parameter array; the
end-to-end check normalizes by the overall gradient scale, since deep
networks contain legitimately near-flat directions (an input scale feeding
a normalization) whose tiny gradients would otherwise turn finite-
difference noise into large ratios.

Probe inputs are chosen so no ReLU preactivation sits within a small margin
of zero: central differences straddle the kink there and stop measuring
the subgradient the implementation is defined to use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model, ops
from .loss_metrics import LossConfig, class_weights, image_loss_from_logits
from .model import NetworkConfig
from .rng import substream
from .tensor import UNLABELED

FD_STEP = 1e-4
SUITE_TOLERANCE = 1e-5
RELU_MARGIN = 2.5e-3


def numerical_gradient(f, arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of the scalar function f w.r.t. arr."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


@dataclass
class CheckResult:
    name: str
    error: float

    def ok(self, tolerance: float = SUITE_TOLERANCE) -> bool:
        return self.error <= tolerance


def _projection_loss(forward, proj):
    def loss():
        return float((forward() * proj).sum())

    return loss


def check_dilated_conv(seed: int, dilation: int) -> list[CheckResult]:
    rng = substream(seed, "gradcheck", "conv", dilation)
    x = rng.standard_normal((2, 5, 6))
    p = ops.ConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), dilation)
    proj = rng.standard_normal((3, 5, 6))
    loss = _projection_loss(lambda: ops.dilated_conv2d_forward(x, p), proj)
    gx, gw, gb = ops.dilated_conv2d_backward(x, p, proj)
    return [
        CheckResult(f"conv3x3_d{dilation}.input", relative_error(gx, numerical_gradient(loss, x))),
        CheckResult(f"conv3x3_d{dilation}.weight", relative_error(gw, numerical_gradient(loss, p.weights))),
        CheckResult(f"conv3x3_d{dilation}.bias", relative_error(gb, numerical_gradient(loss, p.bias))),
    ]


def check_conv1x1(seed: int) -> list[CheckResult]:
    rng = substream(seed, "gradcheck", "conv1x1")
    x = rng.standard_normal((4, 5, 5))
    p = ops.ConvParams(rng.standard_normal((3, 4, 1, 1)), rng.standard_normal(3), 1)
    proj = rng.standard_normal((3, 5, 5))
    loss = _projection_loss(lambda: ops.conv1x1_forward(x, p), proj)
    gx, gw, gb = ops.conv1x1_backward(x, p, proj)
    return [
        CheckResult("conv1x1.input", relative_error(gx, numerical_gradient(loss, x))),
        CheckResult("conv1x1.weight", relative_error(gw, numerical_gradient(loss, p.weights))),
        CheckResult("conv1x1.bias", relative_error(gb, numerical_gradient(loss, p.bias))),
    ]


def check_instance_norm(seed: int) -> list[CheckResult]:
    rng = substream(seed, "gradcheck", "norm")
    x = rng.standard_normal((3, 6, 6))
    p = ops.NormParams(gamma=0.5 + rng.random(3), beta=rng.standard_normal(3))
    proj = rng.standard_normal(x.shape)
    loss = _projection_loss(lambda: ops.instance_norm_forward(x, p), proj)
    gx, gg, gb = ops.instance_norm_backward(x, p, proj)
    return [
        CheckResult("instance_norm.input", relative_error(gx, numerical_gradient(loss, x))),
        CheckResult("instance_norm.gamma", relative_error(gg, numerical_gradient(loss, p.gamma))),
        CheckResult("instance_norm.beta", relative_error(gb, numerical_gradient(loss, p.beta))),
    ]


def check_norm_skip_block(seed: int) -> list[CheckResult]:
    for probe in range(100):
        rng = substream(seed + probe, "gradcheck", "block")
        x = rng.standard_normal((3, 6, 6)) + 0.5
        p = ops.NormParams(gamma=0.5 + rng.random(3), beta=rng.standard_normal(3))
        s = x + ops.instance_norm_forward(x, p)
        if np.abs(s).min() >= RELU_MARGIN:
            break
    proj = rng.standard_normal(x.shape)
    loss = _projection_loss(lambda: ops.norm_skip_block_forward(x, p), proj)
    gx, gg, gb = ops.norm_skip_block_backward(x, p, proj)
    return [
        CheckResult("norm_skip_block.input", relative_error(gx, numerical_gradient(loss, x))),
        CheckResult("norm_skip_block.gamma", relative_error(gg, numerical_gradient(loss, p.gamma))),
        CheckResult("norm_skip_block.beta", relative_error(gb, numerical_gradient(loss, p.beta))),
    ]


def check_relu(seed: int) -> list[CheckResult]:
    rng = substream(seed, "gradcheck", "relu")
    x = rng.standard_normal((2, 5, 5))
    x[np.abs(x) < RELU_MARGIN * 2] = 0.5
    proj = rng.standard_normal(x.shape)
    loss = _projection_loss(lambda: ops.relu_forward(x), proj)
    return [CheckResult("relu.input", relative_error(ops.relu_backward(x, proj), numerical_gradient(loss, x)))]


def check_softmax(seed: int) -> list[CheckResult]:
    rng = substream(seed, "gradcheck", "softmax")
    x = rng.standard_normal((5, 4, 4))
    proj = rng.standard_normal(x.shape)
    loss = _projection_loss(lambda: ops.softmax_channels(x), proj)
    analytic = ops.softmax_backward(ops.softmax_channels(x), proj)
    return [CheckResult("softmax.logits", relative_error(analytic, numerical_gradient(loss, x)))]


def check_loss(seed: int) -> list[CheckResult]:
    rng = substream(seed, "gradcheck", "loss")
    logits = rng.standard_normal((5, 5, 5)) * 1.5
    labels = rng.integers(0, 5, size=(5, 5)).astype(np.uint8)
    labels[rng.random((5, 5)) < 0.4] = UNLABELED
    roi = np.ones((5, 5), dtype=bool)
    roi[0, 0] = False
    weights = class_weights(rng.integers(1, 60, size=5))
    cfg = LossConfig(alpha=0.25)

    def loss():
        return image_loss_from_logits(logits, labels, roi, weights, cfg)[0]

    grad = image_loss_from_logits(logits, labels, roi, weights, cfg)[4]
    return [CheckResult("image_loss.logits", relative_error(grad, numerical_gradient(loss, logits)))]


def _relu_kink_margin(net, cache) -> float:
    margin = np.inf
    mode = net.config.norm_mode
    pairs = list(zip(net.blocks, cache.block_conv_outs))
    pairs += list(zip(net.head_blocks, cache.head_conv_outs))
    for blk, conv_out in pairs:
        if mode == "instance_norm_skip":
            s = conv_out + ops.instance_norm_forward(conv_out, blk.norm)
        elif mode == "instance_norm":
            s = ops.instance_norm_forward(conv_out, blk.norm)
        else:
            s = conv_out
        margin = min(margin, float(np.abs(s).min()))
    return margin


def check_network(config: NetworkConfig, seed: int, spatial: int = 9) -> list[CheckResult]:
    """End-to-end: d(image_loss)/d(parameter) against central differences."""
    rng = None
    net = None
    for probe in range(100):
        net = model.cast_network(model.build(config, seed + probe), np.float64)
        rng = substream(seed + probe, "gradcheck", "network")
        x = rng.standard_normal((1, spatial, spatial))
        _, cache = model.forward(net, x)
        if _relu_kink_margin(net, cache) >= RELU_MARGIN:
            break
    labels = rng.integers(0, config.num_classes, size=(spatial, spatial)).astype(np.uint8)
    labels[rng.random((spatial, spatial)) < 0.3] = UNLABELED
    roi = np.ones((spatial, spatial), dtype=bool)
    weights = class_weights(rng.integers(1, 50, size=config.num_classes))
    loss_cfg = LossConfig(alpha=0.2)

    def loss():
        _, c = model.forward(net, x)
        return image_loss_from_logits(c.logits, labels, roi, weights, loss_cfg)[0]

    _, cache = model.forward(net, x)
    grad_logits = image_loss_from_logits(cache.logits, labels, roi, weights, loss_cfg)[4]
    grads = model.backward(net, cache, grad_logits=grad_logits)
    analytic, numeric = [], []
    for name, arr in net.named_parameters():
        analytic.append(grads[name].reshape(-1))
        numeric.append(numerical_gradient(loss, arr).reshape(-1))
    err = relative_error(np.concatenate(analytic), np.concatenate(numeric))
    return [CheckResult("network.end_to_end", err)]


def default_check_config() -> NetworkConfig:
    """Small architecture: full structure, desk-scale finite differences."""
    return NetworkConfig(
        kernels_per_layer=4,
        dilation_schedule=[1, 1, 2],
        num_dilated_layers=3,
        head_widths=[8, 6],
        num_classes=6,
        dropout_rate=0.0,
    )


def run_suite(config: NetworkConfig | None = None, seed: int = 0) -> list[CheckResult]:
    """The full gradient suite; every entry must come in at or below 1e-5."""
    if config is None:
        config = default_check_config()
    results = []
    for dilation in (1, 2, 3, 5):
        results += check_dilated_conv(seed, dilation)
    results += check_conv1x1(seed)
    results += check_instance_norm(seed)
    results += check_norm_skip_block(seed)
    results += check_relu(seed)
    results += check_softmax(seed)
    results += check_loss(seed)
    results += check_network(config, seed)
    return results
