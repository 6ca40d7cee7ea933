"""Network assembly, execution, analysis, and serialization.

The architecture is a stack of dilated 3x3 convolution blocks that never
downsample, an optional concatenation of the input with every block output,
dropout, two 1x1 blocks, and a final 1x1 classifier feeding a channelwise
softmax. Each block is conv -> instance norm -> additive skip -> ReLU
(variants drop the skip or the normalization). The raw input passes through
the same normalization-plus-skip before the first convolution, and that
post-skip tensor is what joins the concatenation.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, FormatError, ParameterError, ShapeError
from .ops import ConvParams, NormParams
from .rng import substream
from .tensor import tensor_from_bytes, tensor_to_bytes

NORM_MODES = ("instance_norm_skip", "instance_norm", "none")
SCHEDULE_NAMES = ("fibonacci", "exponential", "ones")

CHECKPOINT_MAGIC = b"TSCKPT1\n"
CHECKPOINT_VERSION = 1


def named_schedule(name: str, layers: int) -> list[int]:
    if name == "fibonacci":
        seq, a, b = [], 1, 1
        for _ in range(layers):
            seq.append(a)
            a, b = b, a + b
        return seq
    if name == "exponential":
        return [1] + [2**i for i in range(layers - 1)]
    if name == "ones":
        return [1] * layers
    raise ConfigError(f"unknown dilation schedule {name!r}")


@dataclass
class NetworkConfig:
    """Declarative description of one architecture variant."""

    kernels_per_layer: int = 32
    dilation_schedule: str | list[int] = "fibonacci"
    num_dilated_layers: int = 10
    concat_enabled: bool = True
    norm_mode: str = "instance_norm_skip"
    head_widths: list[int] = field(default_factory=lambda: [128, 32])
    num_classes: int = 6
    dropout_rate: float = 0.5

    def schedule(self) -> list[int]:
        if isinstance(self.dilation_schedule, str):
            return named_schedule(self.dilation_schedule, self.num_dilated_layers)
        return [int(d) for d in self.dilation_schedule]

    def validate(self) -> None:
        problems = []
        if self.kernels_per_layer < 1:
            problems.append(f"kernels_per_layer must be >= 1, got {self.kernels_per_layer}")
        if self.num_dilated_layers < 1:
            problems.append(f"num_dilated_layers must be >= 1, got {self.num_dilated_layers}")
        if isinstance(self.dilation_schedule, str):
            if self.dilation_schedule not in SCHEDULE_NAMES:
                problems.append(f"unknown dilation schedule {self.dilation_schedule!r}")
        else:
            sched = list(self.dilation_schedule)
            if len(sched) != self.num_dilated_layers:
                problems.append(
                    f"schedule length {len(sched)} != num_dilated_layers {self.num_dilated_layers}"
                )
            if any(int(d) < 1 for d in sched):
                problems.append(f"dilation rates must be >= 1, got {sched}")
        if self.norm_mode not in NORM_MODES:
            problems.append(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if any(int(hw) < 1 for hw in self.head_widths):
            problems.append(f"head widths must be positive, got {list(self.head_widths)}")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))

    def concat_channels(self) -> int:
        k, layers = self.kernels_per_layer, self.num_dilated_layers
        return 1 + layers * k if self.concat_enabled else k

    def to_dict(self) -> dict:
        return {
            "kernels_per_layer": self.kernels_per_layer,
            "dilation_schedule": self.schedule(),
            "num_dilated_layers": self.num_dilated_layers,
            "concat_enabled": self.concat_enabled,
            "norm_mode": self.norm_mode,
            "head_widths": list(self.head_widths),
            "num_classes": self.num_classes,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def config_hash(config: NetworkConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class Block:
    conv: ConvParams
    norm: NormParams | None


@dataclass
class Network:
    config: NetworkConfig
    input_norm: NormParams | None
    blocks: list[Block]
    head_blocks: list[Block]
    classifier: ConvParams
    rng_seed: int

    def named_parameters(self):
        """Trainable arrays in a fixed order: (name, array) pairs."""
        if self.input_norm is not None:
            yield "input_norm.gamma", self.input_norm.gamma
            yield "input_norm.beta", self.input_norm.beta
        for prefix, blocks in (("block", self.blocks), ("head", self.head_blocks)):
            for i, blk in enumerate(blocks):
                name = f"{prefix}{i:02d}"
                yield f"{name}.conv.weight", blk.conv.weights
                if blk.conv.bias is not None:
                    yield f"{name}.conv.bias", blk.conv.bias
                if blk.norm is not None:
                    yield f"{name}.norm.gamma", blk.norm.gamma
                    yield f"{name}.norm.beta", blk.norm.beta
        yield "classifier.weight", self.classifier.weights
        yield "classifier.bias", self.classifier.bias

    def named_buffers(self):
        """Non-trainable statistics slots carried by normalization layers."""
        norms = []
        if self.input_norm is not None:
            norms.append(("input_norm", self.input_norm))
        for prefix, blocks in (("block", self.blocks), ("head", self.head_blocks)):
            for i, blk in enumerate(blocks):
                if blk.norm is not None:
                    norms.append((f"{prefix}{i:02d}.norm", blk.norm))
        for name, norm in norms:
            yield f"{name}.running_mean", norm.running_mean
            yield f"{name}.running_var", norm.running_var

    def named_arrays(self):
        yield from self.named_parameters()
        yield from self.named_buffers()

    def parameter_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())


def _make_norm(channels: int, dtype=np.float32) -> NormParams:
    return NormParams(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
    )


def _he_init(rng: np.random.Generator, shape, scale: float = 1.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * (scale * np.sqrt(2.0 / fan_in))).astype(np.float32)


def build(config: NetworkConfig, seed: int) -> Network:
    """Initialize a network: He-scaled conv weights, unit scales, zero shifts.

    Deterministic for a fixed seed; layers are drawn in network order.
    """
    config.validate()
    rng = substream(seed, "init")
    use_norm = config.norm_mode != "none"
    k = config.kernels_per_layer

    input_norm = _make_norm(1) if use_norm else None
    blocks = []
    in_ch = 1
    for dilation in config.schedule():
        conv = ConvParams(
            weights=_he_init(rng, (k, in_ch, 3, 3)),
            bias=None if use_norm else np.zeros(k, dtype=np.float32),
            dilation=int(dilation),
        )
        blocks.append(Block(conv=conv, norm=_make_norm(k) if use_norm else None))
        in_ch = k

    head_blocks = []
    in_ch = config.concat_channels()
    for width in config.head_widths:
        conv = ConvParams(
            weights=_he_init(rng, (width, in_ch, 1, 1)),
            bias=None if use_norm else np.zeros(width, dtype=np.float32),
            dilation=1,
        )
        head_blocks.append(Block(conv=conv, norm=_make_norm(width) if use_norm else None))
        in_ch = width

    # damped output init: logits start near zero so the first predictions sit
    # close to the maximum-entropy point instead of being confidently random
    classifier = ConvParams(
        weights=_he_init(rng, (config.num_classes, in_ch, 1, 1), scale=0.1),
        bias=np.zeros(config.num_classes, dtype=np.float32),
        dilation=1,
    )
    return Network(
        config=config,
        input_norm=input_norm,
        blocks=blocks,
        head_blocks=head_blocks,
        classifier=classifier,
        rng_seed=int(seed),
    )


def param_count(net: Network) -> int:
    """Total size of every parameter and statistics array in the network."""
    return sum(arr.size for _, arr in net.named_arrays())


def receptive_field(config: NetworkConfig) -> int:
    """1 + 2 * sum of dilation rates over the 3x3 layers (1x1 layers add 0)."""
    return 1 + 2 * sum(config.schedule())


@dataclass
class PrefixCoverage:
    depth: int
    dilation: int
    extent: int            # side of the receptive-field box after this prefix
    offsets: int           # distinct input offsets reachable from one output
    coverage_fraction: float
    gap_histogram: dict[int, int]  # uncovered-run length -> count, along rows+cols


def sampling_coverage(config: NetworkConfig) -> list[PrefixCoverage]:
    """Input-sampling pattern of each schedule prefix.

    The reachable offset set of a prefix is the iterated Minkowski sum of
    the dilated 3x3 offset sets; gaps in it are the gridding artifact.
    """
    schedule = config.schedule()
    radius = sum(schedule)
    n = 2 * radius + 1
    grid = np.zeros((n, n), dtype=bool)
    grid[radius, radius] = True
    report = []
    for depth, d in enumerate(schedule, start=1):
        new = np.zeros_like(grid)
        for dy in (-d, 0, d):
            for dx in (-d, 0, d):
                new |= np.roll(np.roll(grid, dy, axis=0), dx, axis=1)
        grid = new
        r = sum(schedule[:depth])
        box = grid[radius - r : radius + r + 1, radius - r : radius + r + 1]
        extent = 2 * r + 1
        gaps: dict[int, int] = {}
        for lines in (box, box.T):
            for line in lines:
                covered = np.flatnonzero(line)
                if covered.size >= 2:
                    for run in np.diff(covered) - 1:
                        if run > 0:
                            gaps[int(run)] = gaps.get(int(run), 0) + 1
        report.append(
            PrefixCoverage(
                depth=depth,
                dilation=int(d),
                extent=extent,
                offsets=int(box.sum()),
                coverage_fraction=float(box.sum() / box.size),
                gap_histogram=gaps,
            )
        )
    return report


@dataclass
class ForwardCache:
    mode: str
    x_in: np.ndarray
    x0: np.ndarray
    block_inputs: list[np.ndarray]
    block_conv_outs: list[np.ndarray]
    dropout_mask: np.ndarray | None
    head_inputs: list[np.ndarray]
    head_conv_outs: list[np.ndarray]
    classifier_input: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def _block_forward(conv_out: np.ndarray, norm: NormParams | None, norm_mode: str) -> np.ndarray:
    if norm_mode == "instance_norm_skip":
        return ops.norm_skip_block_forward(conv_out, norm)
    if norm_mode == "instance_norm":
        return ops.relu_forward(ops.instance_norm_forward(conv_out, norm))
    return ops.relu_forward(conv_out)


def _block_backward(conv_out, norm, norm_mode, grad_out):
    """Returns (grad_conv_out, grad_gamma, grad_beta); norm grads None without norm."""
    if norm_mode == "instance_norm_skip":
        return ops.norm_skip_block_backward(conv_out, norm, grad_out)
    if norm_mode == "instance_norm":
        s = ops.instance_norm_forward(conv_out, norm)
        ds = grad_out * (s > 0)
        return ops.instance_norm_backward(conv_out, norm, ds)
    return ops.relu_backward(conv_out, grad_out), None, None


def _input_block_forward(x: np.ndarray, norm: NormParams | None, norm_mode: str) -> np.ndarray:
    if norm_mode == "instance_norm_skip":
        return x + ops.instance_norm_forward(x, norm)
    if norm_mode == "instance_norm":
        return ops.instance_norm_forward(x, norm)
    return x


def forward(net: Network, image: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None):
    """Run the network on a 1 x H x W image of any size.

    Returns (probs, cache) where probs is num_classes x H x W with per-pixel
    channel sums of 1, and the cache holds what backward needs. Dropout is
    active only in train mode; normalization behaves identically in both.
    """
    if image.ndim != 3 or image.shape[0] != 1:
        raise ShapeError(f"expected a 1 x H x W image, got shape {image.shape}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = net.config

    x0 = _input_block_forward(image, net.input_norm, cfg.norm_mode)
    block_inputs, block_conv_outs, feats = [], [], []
    h = x0
    for blk in net.blocks:
        block_inputs.append(h)
        conv_out = ops.dilated_conv2d_forward(h, blk.conv)
        block_conv_outs.append(conv_out)
        h = _block_forward(conv_out, blk.norm, cfg.norm_mode)
        feats.append(h)

    z = ops.concat_channels([x0] + feats) if cfg.concat_enabled else h
    z, mask = ops.dropout_forward(z, cfg.dropout_rate, mode, rng)
    if mode == "eval":
        mask = None

    head_inputs, head_conv_outs = [], []
    h = z
    for blk in net.head_blocks:
        head_inputs.append(h)
        conv_out = ops.conv1x1_forward(h, blk.conv)
        head_conv_outs.append(conv_out)
        h = _block_forward(conv_out, blk.norm, cfg.norm_mode)

    logits = ops.conv1x1_forward(h, net.classifier)
    probs = ops.softmax_channels(logits)
    cache = ForwardCache(
        mode=mode,
        x_in=image,
        x0=x0,
        block_inputs=block_inputs,
        block_conv_outs=block_conv_outs,
        dropout_mask=mask,
        head_inputs=head_inputs,
        head_conv_outs=head_conv_outs,
        classifier_input=h,
        logits=logits,
        probs=probs,
    )
    return probs, cache


def backward(net: Network, cache: ForwardCache, grad_logits: np.ndarray | None = None,
             grad_probs: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every trainable parameter.

    Pass the upstream gradient either at the logits (preferred for fused
    softmax losses) or at the probabilities.
    """
    if (grad_logits is None) == (grad_probs is None):
        raise ParameterError("pass exactly one of grad_logits or grad_probs")
    if grad_logits is None:
        grad_logits = ops.softmax_backward(cache.probs, grad_probs)
    cfg = net.config
    grads: dict[str, np.ndarray] = {}

    g, gw, gb = ops.conv1x1_backward(cache.classifier_input, net.classifier, grad_logits)
    grads["classifier.weight"] = gw
    grads["classifier.bias"] = gb

    for i in reversed(range(len(net.head_blocks))):
        blk = net.head_blocks[i]
        name = f"head{i:02d}"
        g_conv, g_gamma, g_beta = _block_backward(cache.head_conv_outs[i], blk.norm, cfg.norm_mode, g)
        if blk.norm is not None:
            grads[f"{name}.norm.gamma"] = g_gamma
            grads[f"{name}.norm.beta"] = g_beta
        g, gw, gb = ops.conv1x1_backward(cache.head_inputs[i], blk.conv, g_conv)
        grads[f"{name}.conv.weight"] = gw
        if blk.conv.bias is not None:
            grads[f"{name}.conv.bias"] = gb

    if cache.dropout_mask is not None:
        g = ops.dropout_backward(cache.dropout_mask, cfg.dropout_rate, g)

    if cfg.concat_enabled:
        sizes = [1] + [cfg.kernels_per_layer] * len(net.blocks)
        parts = ops.split_channels(g, sizes)
        g_x0 = parts[0].copy()
        feat_grads = parts[1:]
        carry = np.zeros_like(cache.block_conv_outs[-1])
    else:
        g_x0 = np.zeros_like(cache.x0)
        feat_grads = [None] * len(net.blocks)
        carry = g

    for i in reversed(range(len(net.blocks))):
        blk = net.blocks[i]
        name = f"block{i:02d}"
        g_out = carry if feat_grads[i] is None else carry + feat_grads[i]
        g_conv, g_gamma, g_beta = _block_backward(cache.block_conv_outs[i], blk.norm, cfg.norm_mode, g_out)
        if blk.norm is not None:
            grads[f"{name}.norm.gamma"] = g_gamma
            grads[f"{name}.norm.beta"] = g_beta
        carry, gw, gb = ops.dilated_conv2d_backward(cache.block_inputs[i], blk.conv, g_conv)
        grads[f"{name}.conv.weight"] = gw
        if blk.conv.bias is not None:
            grads[f"{name}.conv.bias"] = gb

    g_x0 = g_x0 + carry
    if net.input_norm is not None:
        # with the additive skip the identity path only alters the (unused)
        # image gradient; gamma/beta see the same upstream either way
        _, g_gamma, g_beta = ops.instance_norm_backward(cache.x_in, net.input_norm, g_x0)
        grads["input_norm.gamma"] = g_gamma
        grads["input_norm.beta"] = g_beta
    return grads


def cast_network(net: Network, dtype) -> Network:
    """Deep copy of the network with every array converted to `dtype`."""
    out = copy.deepcopy(net)
    for norm in _all_norms(out):
        norm.gamma = norm.gamma.astype(dtype)
        norm.beta = norm.beta.astype(dtype)
        if norm.running_mean is not None:
            norm.running_mean = norm.running_mean.astype(dtype)
            norm.running_var = norm.running_var.astype(dtype)
    for blk in out.blocks + out.head_blocks:
        blk.conv.weights = blk.conv.weights.astype(dtype)
        if blk.conv.bias is not None:
            blk.conv.bias = blk.conv.bias.astype(dtype)
    out.classifier.weights = out.classifier.weights.astype(dtype)
    out.classifier.bias = out.classifier.bias.astype(dtype)
    return out


def _all_norms(net: Network):
    if net.input_norm is not None:
        yield net.input_norm
    for blk in net.blocks + net.head_blocks:
        if blk.norm is not None:
            yield blk.norm


def save_checkpoint(net: Network, path) -> None:
    """Write config, seed, and every array: JSON header + TSR1 payloads."""
    blobs, directory, offset = [], [], 0
    for name, arr in net.named_arrays():
        blob = tensor_to_bytes(np.ascontiguousarray(arr))
        directory.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "length": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "seed": net.rng_seed,
        "config_hash": config_hash(net.config),
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_config: NetworkConfig | None = None) -> Network:
    """Rebuild a network from a checkpoint, bit-exactly.

    With `expected_config`, a differing stored config raises ConfigError.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 4:
        raise FormatError("truncated header length")
    (header_len,) = struct.unpack("<I", raw[pos : pos + 4])
    pos += 4
    if len(raw) < pos + header_len:
        raise FormatError("truncated header")
    try:
        header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable header: {exc}") from exc
    pos += header_len
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"format_version {header.get('format_version')} unsupported")
    config = NetworkConfig.from_dict(header["config"])
    if header.get("config_hash") != config_hash(config):
        raise FormatError("config_hash does not match stored config")
    if expected_config is not None and config.to_dict() != expected_config.to_dict():
        raise ConfigError("config mismatch: checkpoint was built with a different config")

    net = build(config, int(header["seed"]))
    arrays = dict(net.named_arrays())
    stored = {entry["name"]: entry for entry in header["tensors"]}
    if set(stored) != set(arrays):
        missing = sorted(set(arrays) - set(stored))
        extra = sorted(set(stored) - set(arrays))
        raise FormatError(f"tensor directory mismatch: missing {missing}, extra {extra}")
    payload = raw[pos:]
    for name, arr in arrays.items():
        entry = stored[name]
        blob = payload[entry["offset"] : entry["offset"] + entry["length"]]
        value = tensor_from_bytes(blob)
        if list(value.shape) != list(arr.shape):
            raise FormatError(f"tensor {name}: shape {value.shape} != expected {arr.shape}")
        arr[...] = value
    return net


@dataclass
class Variant:
    name: str
    config: NetworkConfig
    reported_params_1e5: float
    reported_bacc: float | None = None


def builtin_variants() -> list[Variant]:
    """The standard configuration grid used for architecture comparisons."""
    fib9 = named_schedule("fibonacci", 9)
    return [
        Variant("w/o dilated convolutions", NetworkConfig(dilation_schedule="ones"), 1.30, 68.0),
        Variant("w/o concatenation", NetworkConfig(concat_enabled=False), 0.93, 72.6),
        Variant("w/o InstanceNorm", NetworkConfig(norm_mode="none"), 1.29, 77.9),
        Variant("w/o InstanceNorm skip", NetworkConfig(norm_mode="instance_norm"), 1.30, 78.6),
        Variant("16 kernels/layer", NetworkConfig(kernels_per_layer=16), 0.47, 79.2),
        Variant(
            "Exponential dilation",
            NetworkConfig(dilation_schedule="exponential", num_dilated_layers=8),
            1.03,
            79.5,
        ),
        Variant("Purely supervised", NetworkConfig(), 1.30, 80.6),
        Variant(
            "9 dilated layers",
            NetworkConfig(dilation_schedule=fib9, num_dilated_layers=9),
            1.18,
            81.3,
        ),
        Variant("Proposed", NetworkConfig(), 1.30, 81.8),
        Variant("64 kernels/layer", NetworkConfig(kernels_per_layer=64), 4.23, 82.1),
    ]
