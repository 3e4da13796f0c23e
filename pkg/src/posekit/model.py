"""Pose model: backbone stub, lightweight deconvolution head, parallel attention.

Layout, in forward order::

    backbone.i   conv3x3/stride + BN + ReLU        (stand-in for a mobile backbone)
    compress     conv1x1 + BN + ReLU               (channel compression)
    head.i       depthwise deconv + conv1x1 + BN + ReLU [+ attention]
    final        conv1x1 to one map per joint

With ``head_variant="standard"`` each head stage is a full deconvolution
followed by BN + ReLU instead, which is what the lightweight stage replaces.
"""
import dataclasses
import hashlib
import io
import struct

import numpy as np

from . import config as cfgtext
from . import tensor as T
from .config import ConfigError
from .nn import BatchNorm2d, Conv2d, Deconv2d, Module, ModuleList
from .tensor import ShapeError


@dataclasses.dataclass
class ModelConfig:
    input_size: tuple[int, int] = (256, 192)
    in_channels: int = 3
    num_joints: int = 17
    backbone_channels: tuple[int, ...] = (16, 24, 40, 80, 160)
    backbone_strides: tuple[int, ...] | None = None
    head_variant: str = "lightweight"
    head_layers: int = 3
    head_kernel: int = 4
    head_channels: int | tuple[int, ...] = 256
    squeeze_ratio: int = 16
    attention_enabled: bool = True
    conv_bias: bool = True
    deconv_bias: bool = False
    heatmap_size: tuple[int, int] | None = None

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.backbone_channels = tuple(self.backbone_channels)
        if self.backbone_strides is not None:
            self.backbone_strides = tuple(self.backbone_strides)
        if not isinstance(self.head_channels, int):
            self.head_channels = tuple(self.head_channels)
        if self.heatmap_size is not None:
            self.heatmap_size = tuple(self.heatmap_size)

    @property
    def strides(self):
        if self.backbone_strides is None:
            return (2,) * len(self.backbone_channels)
        return self.backbone_strides

    @property
    def output_stride(self):
        return int(np.prod(self.strides, dtype=np.int64))

    @property
    def channels(self):
        """Per-stage head output channels."""
        if isinstance(self.head_channels, int):
            return (self.head_channels,) * self.head_layers
        return self.head_channels

    @property
    def output_size(self):
        h, w = self.input_size
        up = 2**self.head_layers
        return (h // self.output_stride * up, w // self.output_stride * up)

    @property
    def feature_stride(self):
        """Input pixels per heatmap pixel."""
        return self.input_size[0] / self.output_size[0]

    def validate(self):
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ConfigError(f"input_size must be positive, got {self.input_size}")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.num_joints < 1:
            raise ConfigError("num_joints must be >= 1")
        if self.head_layers < 0:
            raise ConfigError("head_layers must be >= 0")
        if len(self.strides) != len(self.backbone_channels):
            raise ConfigError("backbone_strides and backbone_channels differ in length")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigError(f"backbone strides must be 1 or 2, got {self.strides}")
        if any(c < 1 for c in self.backbone_channels):
            raise ConfigError("backbone channels must be positive")
        if h % self.output_stride or w % self.output_stride:
            raise ConfigError(f"input_size {self.input_size} not divisible by backbone stride {self.output_stride}")
        if self.head_variant not in ("lightweight", "standard"):
            raise ConfigError(f"head_variant must be 'lightweight' or 'standard', got {self.head_variant!r}")
        if self.head_kernel < 2 or self.head_kernel % 2:
            raise ConfigError(f"head_kernel must be even and >= 2 for stride-2 stages, got {self.head_kernel}")
        if not isinstance(self.head_channels, int) and len(self.head_channels) != self.head_layers:
            raise ConfigError("head_channels list length must equal head_layers")
        if any(c < 1 for c in self.channels) or (isinstance(self.head_channels, int) and self.head_channels < 1):
            raise ConfigError("head channels must be positive")
        if self.attention_enabled:
            if self.squeeze_ratio < 1:
                raise ConfigError("squeeze_ratio must be >= 1")
            for c in self.channels:
                if c % self.squeeze_ratio:
                    raise ConfigError(f"head channels {c} not divisible by squeeze_ratio {self.squeeze_ratio}")
        if self.heatmap_size is not None and self.heatmap_size != self.output_size:
            raise ConfigError(f"heatmap_size {self.heatmap_size} inconsistent with derived {self.output_size}")
        return self

    def to_text(self):
        return cfgtext.dump(self)

    @classmethod
    def from_text(cls, text, strict=True):
        return cfgtext.load(cls, text, strict=strict).validate()


# ---------------------------------------------------------------------------
# attention


def channel_attention(f, squeeze_w, squeeze_b, excite_w, excite_b):
    """f * hsig(excite(squeeze(GAP(f)))), the map broadcast over H and W."""
    pooled = T.global_avg_pool(f)
    gate = T.hard_sigmoid(T.conv2d(T.conv2d(pooled, squeeze_w, squeeze_b), excite_w, excite_b))
    return T.mul(f, gate)


def spatial_attention(f, reduce_w, reduce_b, conv_w, conv_b):
    """f * hsig(conv3x3(conv1x1(f))), the N x 1 x H x W map broadcast over channels."""
    gate = T.hard_sigmoid(T.conv2d(T.conv2d(f, reduce_w, reduce_b), conv_w, conv_b, padding=1))
    return T.mul(f, gate)


def attention_block(f, channel_weights, spatial_weights):
    """f + channel_attention(f) + spatial_attention(f)."""
    return T.add(T.add(f, channel_attention(f, *channel_weights)), spatial_attention(f, *spatial_weights))


def attention_params(channels, ratio, bias=True):
    """Parameters added by one attention block: weights plus biases."""
    mid = channels // ratio
    weights = 2 * channels * mid + channels + 9
    biases = (mid + channels + 1 + 1) if bias else 0
    return weights + biases


class ChannelAttention(Module):
    def __init__(self, rng, channels, ratio, bias=True):
        super().__init__()
        self.squeeze = Conv2d(rng, channels, channels // ratio, 1, bias=bias)
        self.excite = Conv2d(rng, channels // ratio, channels, 1, bias=bias)

    def weights(self):
        return self.squeeze.weight, self.squeeze.bias, self.excite.weight, self.excite.bias

    def forward(self, f):
        pooled = T.global_avg_pool(f)
        return T.mul(f, T.hard_sigmoid(self.excite(self.squeeze(pooled))))

    def describe(self, hw):
        yield self.squeeze, (1, 1), (1, 1)
        yield self.excite, (1, 1), (1, 1)


class SpatialAttention(Module):
    def __init__(self, rng, channels, bias=True):
        super().__init__()
        self.reduce = Conv2d(rng, channels, 1, 1, bias=bias)
        self.conv = Conv2d(rng, 1, 1, 3, padding=1, bias=bias)

    def weights(self):
        return self.reduce.weight, self.reduce.bias, self.conv.weight, self.conv.bias

    def forward(self, f):
        return T.mul(f, T.hard_sigmoid(self.conv(self.reduce(f))))

    def describe(self, hw):
        yield self.reduce, hw, hw
        yield self.conv, hw, hw


class AttentionBlock(Module):
    def __init__(self, rng, channels, ratio, bias=True):
        super().__init__()
        self.channel = ChannelAttention(rng, channels, ratio, bias)
        self.spatial = SpatialAttention(rng, channels, bias)

    def forward(self, f):
        return T.add(T.add(f, self.channel(f)), self.spatial(f))

    def describe(self, hw):
        yield from self.channel.describe(hw)
        yield from self.spatial.describe(hw)


# ---------------------------------------------------------------------------
# stages


class ConvStage(Module):
    """conv + BN + ReLU."""

    def __init__(self, rng, cin, cout, kernel, stride, bias):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, kernel, stride, (kernel - 1) // 2, bias=bias)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))

    def out_hw(self, hw):
        return self.conv.out_hw(hw)

    def describe(self, hw):
        yield self.conv, hw, self.conv.out_hw(hw)


class DeconvStage(Module):
    """One upsampling head stage; doubles H and W."""

    def __init__(self, rng, cin, cout, kernel, variant, attention_ratio=None, conv_bias=True, deconv_bias=False):
        super().__init__()
        self.variant = variant
        pad = (kernel - 2) // 2
        if variant == "lightweight":
            self.deconv = Deconv2d(rng, cin, cin, kernel, 2, pad, groups=cin, bias=deconv_bias)
            self.pointwise = Conv2d(rng, cin, cout, 1, bias=conv_bias)
        else:
            self.deconv = Deconv2d(rng, cin, cout, kernel, 2, pad, groups=1, bias=deconv_bias)
            self.pointwise = None
        self.bn = BatchNorm2d(cout)
        self.attention = AttentionBlock(rng, cout, attention_ratio, conv_bias) if attention_ratio else None

    def forward(self, x):
        y = self.deconv(x)
        if self.pointwise is not None:
            y = self.pointwise(y)
        y = T.relu(self.bn(y))
        if self.attention is not None:
            y = self.attention(y)
        return y

    def out_hw(self, hw):
        return self.deconv.out_hw(hw)

    def describe(self, hw):
        out = self.deconv.out_hw(hw)
        yield self.deconv, hw, out
        if self.pointwise is not None:
            yield self.pointwise, out, out
        if self.attention is not None:
            yield from self.attention.describe(out)


def lightweight_deconv_stage(f, stage):
    """Run one head stage (``DeconvStage``) on ``f``."""
    return stage(f)


class PoseModel(Module):
    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        self.backbone = ModuleList()
        cin = config.in_channels
        for cout, stride in zip(config.backbone_channels, config.strides):
            self.backbone.append(ConvStage(rng, cin, cout, 3, stride, config.conv_bias))
            cin = cout
        chans = config.channels
        first = chans[0] if chans else (config.head_channels if isinstance(config.head_channels, int) else cin)
        self.compress = ConvStage(rng, cin, first, 1, 1, config.conv_bias)
        self.head = ModuleList()
        ratio = config.squeeze_ratio if config.attention_enabled else None
        cin = first
        for cout in chans:
            self.head.append(DeconvStage(rng, cin, cout, config.head_kernel, config.head_variant, ratio,
                                         config.conv_bias, config.deconv_bias))
            cin = cout
        self.final = Conv2d(rng, cin, config.num_joints, 1, bias=True)
        self.assign_paths()

    def forward(self, x):
        x = T.as_tensor(x)
        c = self.config
        if x.ndim != 4:
            raise ShapeError("forward", "rank", f"expected N x C x H x W input, got {x.shape}")
        if x.shape[1] != c.in_channels:
            raise ShapeError("forward", "channel", f"expected {c.in_channels} channels, got {x.shape[1]}")
        if x.shape[2] != c.input_size[0]:
            raise ShapeError("forward", "height", f"expected height {c.input_size[0]}, got {x.shape[2]}")
        if x.shape[3] != c.input_size[1]:
            raise ShapeError("forward", "width", f"expected width {c.input_size[1]}, got {x.shape[3]}")
        for stage in self.backbone:
            x = stage(x)
        x = self.compress(x)
        for stage in self.head:
            x = stage(x)
        return self.final(x)

    def describe(self):
        """Yield ``(layer, in_hw, out_hw)`` for every conv/deconv layer, in forward order."""
        hw = self.config.input_size
        for stage in self.backbone:
            yield from stage.describe(hw)
            hw = stage.out_hw(hw)
        yield from self.compress.describe(hw)
        for stage in self.head:
            yield from stage.describe(hw)
            hw = stage.out_hw(hw)
        yield self.final, hw, hw

    def checksum(self):
        """SHA-256 over parameter names and raw values."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def build_model(config, seed=0):
    """Build a model with He-normal conv kernels, zero biases and unit BN scales."""
    config.validate()
    return PoseModel(config, np.random.default_rng(seed))


def forward(model, batch):
    return model(batch)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"PKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _blobs(model):
    yield from model.named_parameters()
    for name, buf in model.named_buffers():
        yield name, buf


def save_checkpoint(model, path):
    """Write magic, version, config text, then every parameter and buffer blob."""
    text = model.config.to_text().encode("utf-8")
    blobs = list(_blobs(model))
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<B", VERSION))
    out.write(struct.pack("<I", len(text)))
    out.write(text)
    out.write(struct.pack("<I", len(blobs)))
    for name, value in blobs:
        arr = value.data if isinstance(value, T.Tensor) else value
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<B", take(1))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (tlen,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_text(bytes(take(tlen)).decode("utf-8"))
    model = build_model(config, seed=0)
    targets = dict(_blobs(model))
    (count,) = struct.unpack("<I", take(4))
    if count != len(targets):
        raise CheckpointError(f"{path}: {count} blobs, model expects {len(targets)}")
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        if name not in targets:
            raise CheckpointError(f"{path}: unexpected blob {name!r}")
        target = targets[name]
        arr = target.data if isinstance(target, T.Tensor) else target
        if arr.shape != tuple(shape):
            raise CheckpointError(f"{path}: blob {name!r} has shape {shape}, model expects {arr.shape}")
        arr[...] = values
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return model
