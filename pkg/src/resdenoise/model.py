"""Residual U-Net denoiser and the frozen feature extractor for the perceptual loss."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .tensor_core import Parameter, Rng, ShapeError

# ImageNet channel statistics, applied after replicating grey to RGB
EXTRACTOR_MEAN = (0.485, 0.456, 0.406)
EXTRACTOR_STD = (0.229, 0.224, 0.225)


@dataclass
class ModelConfig:
    input_height: int = 200
    input_width: int = 400
    depth: int = 3
    channels: tuple = (32, 64, 128)
    bottleneck: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if len(self.channels) != self.depth:
            raise ValueError(f"channels {self.channels} must list one count per level (depth={self.depth})")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel counts must be positive, got {self.channels}")
        if self.bottleneck is None:
            self.bottleneck = 2 * self.channels[-1]
        factor = 2 ** self.depth
        if self.input_height % factor or self.input_width % factor:
            raise ValueError(
                f"input {self.input_height}x{self.input_width} is not divisible by 2**depth = {factor}"
            )

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv:
    """Same-padded convolution layer (1x1 or 3x3)."""

    def __init__(self, name, cin, cout, k, rng, dtype=np.float32, stride=1, trainable=True):
        self.stride = stride
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (k, k, cin, cout), k * k * cin, dtype), trainable)
        self.bias = Parameter(f"{name}.bias", np.zeros(cout, dtype=dtype), trainable)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return tc.conv2d(x, self.weight.value, self.bias.value, self.stride)

    def backward(self, dout, cache):
        dx, dw, db = tc.conv2d_backward(dout, cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class UpConv:
    """2x2 stride-2 transposed convolution."""

    def __init__(self, name, cin, cout, rng, dtype=np.float32):
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (2, 2, cin, cout), cin, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout, dtype=dtype))

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return tc.conv2d_transpose(x, self.weight.value, self.bias.value)

    def backward(self, dout, cache):
        dx, dw, db = tc.conv2d_transpose_backward(dout, cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm:
    def __init__(self, name, channels, dtype=np.float32):
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.state = tc.BatchNormState(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))
        self.name = name

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.state.running_mean),
                (f"{self.name}.running_var", self.state.running_var)]

    def forward(self, x, train):
        return tc.batchnorm(x, self.gamma.value, self.beta.value, self.state, train)

    def backward(self, dout, cache):
        dx, dg, db = tc.batchnorm_backward(dout, cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ResidualBlock:
    """conv3x3-BN-ReLU-conv3x3-BN plus a conv1x1-BN projection, then ReLU."""

    def __init__(self, name, in_channels, out_channels, rng, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = Conv(f"{name}.conv1", in_channels, out_channels, 3, rng, dtype)
        self.bn1 = BatchNorm(f"{name}.bn1", out_channels, dtype)
        self.conv2 = Conv(f"{name}.conv2", out_channels, out_channels, 3, rng, dtype)
        self.bn2 = BatchNorm(f"{name}.bn2", out_channels, dtype)
        self.shortcut_conv = Conv(f"{name}.shortcut_conv", in_channels, out_channels, 1, rng, dtype)
        self.shortcut_bn = BatchNorm(f"{name}.shortcut_bn", out_channels, dtype)
        self._cache = None

    def layers(self):
        return [self.conv1, self.bn1, self.conv2, self.bn2, self.shortcut_conv, self.shortcut_bn]

    def parameters(self):
        return [p for layer in self.layers() for p in layer.parameters()]

    def buffers(self):
        return [b for bn in (self.bn1, self.bn2, self.shortcut_bn) for b in bn.buffers()]

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"residual block expects {self.in_channels} input channels, got shape {x.shape}")
        h, c1 = self.conv1.forward(x)
        h, b1 = self.bn1.forward(h, train)
        h, r1 = tc.relu(h)
        h, c2 = self.conv2.forward(h)
        h, b2 = self.bn2.forward(h, train)
        s, cs = self.shortcut_conv.forward(x)
        s, bs = self.shortcut_bn.forward(s, train)
        out, r2 = tc.relu(tc.add(h, s))
        self._cache = (c1, b1, r1, c2, b2, cs, bs, r2)
        return out

    def backward(self, dout):
        c1, b1, r1, c2, b2, cs, bs, r2 = self._cache
        dz = tc.relu_backward(dout, r2)
        ds = self.shortcut_bn.backward(dz, bs)
        dx = self.shortcut_conv.backward(ds, cs)
        dh = self.bn2.backward(dz, b2)
        dh = self.conv2.backward(dh, c2)
        dh = tc.relu_backward(dh, r1)
        dh = self.bn1.backward(dh, b1)
        return dx + self.conv1.backward(dh, c1)


class ResUNet:
    """Encoder/decoder with residual blocks, concatenated skips and a sigmoid head.

    Encoder level ``k`` runs a residual block, keeps its output as the skip
    tensor, then max-pools. The decoder mirrors it: transposed conv,
    concatenate the skip, residual block. A 1x1 conv + sigmoid produces the
    single-channel output.
    """

    def __init__(self, config: ModelConfig, rng: Rng | None = None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        gen = (rng or Rng(config.seed)).stream("init_resunet")
        ch = config.channels
        self.encoder = []
        cin = 1
        for k, c in enumerate(ch):
            self.encoder.append(ResidualBlock(f"enc{k}", cin, c, gen, dtype))
            cin = c
        self.bottleneck = ResidualBlock("bottleneck", cin, config.bottleneck, gen, dtype)
        cin = config.bottleneck
        self.decoder = []
        for k in reversed(range(config.depth)):
            up = UpConv(f"dec{k}.up", cin, ch[k], gen, dtype)
            block = ResidualBlock(f"dec{k}.block", 2 * ch[k], ch[k], gen, dtype)
            self.decoder.append((up, block))
            cin = ch[k]
        self.head = Conv("head", ch[0], 1, 1, gen, dtype)
        self._cache = None

    def parameters(self):
        params = [p for b in self.encoder for p in b.parameters()]
        params += self.bottleneck.parameters()
        for up, block in self.decoder:
            params += up.parameters() + block.parameters()
        return params + self.head.parameters()

    def buffers(self):
        bufs = [b for blk in self.encoder for b in blk.buffers()]
        bufs += self.bottleneck.buffers()
        for _, block in self.decoder:
            bufs += block.buffers()
        return bufs

    def named_tensors(self):
        """All persistent arrays in a fixed order: parameters then BN running stats."""
        return [(p.name, p.value) for p in self.parameters()] + self.buffers()

    @property
    def n_parameters(self):
        return sum(p.value.size for p in self.parameters())

    def _check_input(self, x):
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.input_height, cfg.input_width, 1):
            raise ShapeError(
                f"expected input of shape (batch, {cfg.input_height}, {cfg.input_width}, 1), got {x.shape}"
            )

    def forward(self, x, train=True, zero_skips=()):
        """Denoise a batch. ``zero_skips`` lists encoder levels whose skip tensor is replaced by zeros."""
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        skips, pools = [], []
        h = x
        for k, block in enumerate(self.encoder):
            h = block.forward(h, train)
            skips.append(np.zeros_like(h) if k in zero_skips else h)
            h, pc = tc.maxpool2(h)
            pools.append(pc)
        h = self.bottleneck.forward(h, train)
        ups, cats = [], []
        for (up, block), k in zip(self.decoder, reversed(range(self.config.depth))):
            h, uc = up.forward(h)
            h, split = tc.concat_channels(h, skips[k])
            h = block.forward(h, train)
            ups.append(uc)
            cats.append(split)
        h, hc = self.head.forward(h)
        out, sc = tc.sigmoid(h)
        self._cache = (pools, ups, cats, hc, sc, tuple(zero_skips))
        return out

    def backward(self, dout):
        """Accumulate parameter gradients; return the gradient w.r.t. the input."""
        pools, ups, cats, hc, sc, zero_skips = self._cache
        dh = tc.sigmoid_backward(dout, sc)
        dh = self.head.backward(dh, hc)
        dskips = [None] * self.config.depth
        for (up, block), k, uc, split in reversed(list(zip(self.decoder, reversed(range(self.config.depth)), ups, cats))):
            dh = block.backward(dh)
            dh, dskip = tc.concat_channels_backward(dh, split)
            dskips[k] = dskip if k not in zero_skips else np.zeros_like(dskip)
            dh = up.backward(dh, uc)
        dh = self.bottleneck.backward(dh)
        for k in reversed(range(self.config.depth)):
            dh = tc.maxpool2_backward(dh, pools[k]) + dskips[k]
            dh = self.encoder[k].backward(dh)
        return dh

    def predict(self, x):
        return self.forward(x, train=False)


def init_resunet(config: ModelConfig, rng: Rng | None = None, dtype=np.float32) -> ResUNet:
    """Build a Residual U-Net with He-normal conv weights, zero biases, identity BN."""
    return ResUNet(config, rng, dtype)


@dataclass
class FeatureStack:
    layers: list = field(default_factory=list)

    @property
    def element_counts(self):
        return [int(f.size) for f in self.layers]


class FeatureExtractor:
    """Frozen stack of stride-2 3x3 conv + SiLU stages.

    Input is a single-channel image in [0, 1]; it is replicated to three
    channels and normalised with ImageNet statistics before the first
    stage. Weights are drawn once from ``seed`` and never trained.
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 64), seed: int = 0, dtype=np.float32,
                 mean=EXTRACTOR_MEAN, std=EXTRACTOR_STD):
        self.channels = tuple(int(c) for c in channels)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.mean = np.asarray(mean, dtype=self.dtype)
        self.std = np.asarray(std, dtype=self.dtype)
        gen = Rng(self.seed).stream("feature_extractor")
        self.stages = []
        cin = 3
        for l, c in enumerate(self.channels):
            self.stages.append(Conv(f"extractor.stage{l}", cin, c, 3, gen, dtype, stride=2, trainable=False))
            cin = c

    def parameters(self):
        return [p for s in self.stages for p in s.parameters()]

    def forward(self, x):
        """Return ``(FeatureStack, cache)``."""
        if x.ndim != 4 or x.shape[3] != 1:
            raise ShapeError(f"feature extractor expects single-channel input, got shape {x.shape}")
        h = (np.repeat(x.astype(self.dtype, copy=False), 3, axis=3) - self.mean) / self.std
        layers, caches = [], []
        for stage in self.stages:
            h, cc = stage.forward(h)
            h, ac = tc.silu(h)
            layers.append(h)
            caches.append((cc, ac))
        return FeatureStack(layers), caches

    def backward(self, dlayers, caches):
        """Gradient w.r.t. the input image given per-layer upstream gradients.

        Stage parameters are frozen, so their gradients are not accumulated.
        """
        dh = None
        for l in reversed(range(len(self.stages))):
            g = dlayers[l] if dh is None else dh + dlayers[l]
            cc, ac = caches[l]
            g = tc.silu_backward(g, ac)
            dh, _, _ = tc.conv2d_backward(g, cc)
        return (dh / self.std).sum(axis=3, keepdims=True)


def extract_features(x, extractor: FeatureExtractor) -> FeatureStack:
    return extractor.forward(x)[0]
