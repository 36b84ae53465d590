"""Toy residual encoder-decoder with the superpixel attention module."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FormatError
from .superpixel import region_means, sp_avg_pool, sp_paint, sp_unpool
from .tensor import (
    Parameter,
    RunningStats,
    Tensor,
    activation,
    batchnorm2d,
    combine,
    conv2d,
    he_uniform,
    upsample_nearest2x,
)

NUM_CLASSES = 5
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    height: int = 140
    width: int = 140
    base_channels: int = 16
    multipliers: tuple = (1, 2, 4)
    num_classes: int = NUM_CLASSES
    seed: int = 0
    sam_mode: str = "add"
    dtype: str = "float32"
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "multipliers", tuple(int(m) for m in self.multipliers))
        if self.height % 28 or self.width % 28 or self.height <= 0 or self.width <= 0:
            raise ConfigurationError(f"input extents {self.height}x{self.width} must be divisible by 28")
        if len(self.multipliers) != 3 or min(self.multipliers) < 1 or self.base_channels < 1:
            raise ConfigurationError("need three positive stage multipliers and base_channels >= 1")
        if self.sam_mode not in ("add", "concat"):
            raise ConfigurationError(f"sam_mode must be 'add' or 'concat', got {self.sam_mode!r}")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


# ---------------------------------------------------------------------------
# Layers


class Conv2d:
    def __init__(self, name, cin, cout, kernel, rng, dtype, stride=1, padding=None):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(f"{name}.weight", he_uniform((cout, cin, kernel, kernel), rng, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout, dtype=dtype), decay=False)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class BatchNorm2d:
    def __init__(self, name, channels, dtype, momentum=0.1, epsilon=1e-5):
        self.name = name
        self.scale = Parameter(f"{name}.scale", np.ones(channels, dtype=dtype), decay=False)
        self.shift = Parameter(f"{name}.shift", np.zeros(channels, dtype=dtype), decay=False)
        self.stats = RunningStats(channels, dtype)
        self.momentum = momentum
        self.epsilon = epsilon

    def __call__(self, x, mode):
        return batchnorm2d(x, self.scale, self.shift, self.stats, mode, self.momentum, self.epsilon)

    def parameters(self):
        return [self.scale, self.shift]


class ConvBNReLU:
    def __init__(self, name, cin, cout, rng, cfg, stride=1):
        dt = cfg.np_dtype
        self.conv = Conv2d(f"{name}.conv", cin, cout, 3, rng, dt, stride=stride)
        self.bn = BatchNorm2d(f"{name}.bn", cout, dt, cfg.bn_momentum, cfg.bn_epsilon)

    def __call__(self, x, mode):
        return activation(self.bn(self.conv(x), mode), "relu")

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    def norms(self):
        return [self.bn]


class ResidualBlock:
    """conv-BN-relu-conv-BN plus identity (1x1 projection on shape change), relu after the sum."""

    def __init__(self, name, cin, cout, rng, cfg, stride=1):
        dt = cfg.np_dtype
        self.conv1 = Conv2d(f"{name}.conv1", cin, cout, 3, rng, dt, stride=stride)
        self.bn1 = BatchNorm2d(f"{name}.bn1", cout, dt, cfg.bn_momentum, cfg.bn_epsilon)
        self.conv2 = Conv2d(f"{name}.conv2", cout, cout, 3, rng, dt)
        self.bn2 = BatchNorm2d(f"{name}.bn2", cout, dt, cfg.bn_momentum, cfg.bn_epsilon)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(f"{name}.proj", cin, cout, 1, rng, dt, stride=stride, padding=0)

    def __call__(self, x, mode):
        y = activation(self.bn1(self.conv1(x), mode), "relu")
        y = self.bn2(self.conv2(y), mode)
        skip = self.proj(x) if self.proj is not None else x
        return activation(combine(y, skip, "add"), "relu")

    def parameters(self):
        ps = self.conv1.parameters() + self.bn1.parameters() + self.conv2.parameters() + self.bn2.parameters()
        return ps + (self.proj.parameters() if self.proj is not None else [])

    def norms(self):
        return [self.bn1, self.bn2]


def sam_forward(features, maps, w, mode="add"):
    """Recalibrate ``features`` with their unpooled superpixel means through
    the 1x1 convolution ``w`` (a :class:`Conv2d`)."""
    regional = sp_avg_pool(features, maps)
    unpooled = sp_unpool(regional)
    if mode == "add":
        merged = combine(unpooled, features, "add")
    elif mode == "concat":
        merged = combine(features, unpooled, "concat_channels")
    else:
        raise ConfigurationError(f"unknown SAM mode {mode!r}")
    return w(merged)


class SuperpixelAttention:
    def __init__(self, name, channels, rng, cfg):
        cin = channels * (2 if cfg.sam_mode == "concat" else 1)
        self.mode = cfg.sam_mode
        self.w = Conv2d(f"{name}.w", cin, channels, 1, rng, cfg.np_dtype, padding=0)

    def __call__(self, features, maps):
        return sam_forward(features, maps, self.w, self.mode)

    def parameters(self):
        return self.w.parameters()


@dataclass
class SanetOutput:
    probabilities: Tensor  # (sum K, 5), graph-connected
    logits: Tensor  # (sum K, 5) superpixel logits
    pixel_logits: Tensor  # (N, 5, H, W) head output
    pixel_probabilities: np.ndarray  # (N, 5, H, W), painted from the superpixel probabilities
    offsets: np.ndarray

    def sample_probabilities(self, n):
        return self.probabilities.data[self.offsets[n]:self.offsets[n + 1]]


class ToySANet:
    def __init__(self, config=ModelConfig()):
        self.config = cfg = config
        rng = np.random.default_rng(config.seed)
        c0, c1, c2 = (config.base_channels * m for m in config.multipliers)
        self.stem = ConvBNReLU("stem", 3, c0, rng, cfg)
        self.stage_a = ResidualBlock("stage_a", c0, c1, rng, cfg, stride=2)
        self.stage_b = ResidualBlock("stage_b", c1, c2, rng, cfg, stride=2)
        self.dec1 = ConvBNReLU("dec1", c2 + c1, c1, rng, cfg)
        self.dec2 = ConvBNReLU("dec2", c1 + c0, c0, rng, cfg)
        self.sam = SuperpixelAttention("sam", c0, rng, cfg)
        self.head = Conv2d("head", c0, config.num_classes, 1, rng, cfg.np_dtype, padding=0)
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate parameter names")

    def parameters(self):
        ps = []
        for block in (self.stem, self.stage_a, self.stage_b, self.dec1, self.dec2, self.sam, self.head):
            ps.extend(block.parameters())
        return ps

    def norms(self):
        out = []
        for block in (self.stem, self.stage_a, self.stage_b, self.dec1, self.dec2):
            out.extend(block.norms())
        return out

    def parameter_count(self):
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def features(self, x, maps, mode="train"):
        s = self.stem(x, mode)
        a = self.stage_a(s, mode)
        b = self.stage_b(a, mode)
        d1 = self.dec1(combine(upsample_nearest2x(b), a, "concat_channels"), mode)
        d2 = self.dec2(combine(upsample_nearest2x(d1), s, "concat_channels"), mode)
        return self.sam(d2, maps)

    def forward(self, image, maps, mode="train"):
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.config.np_dtype))
        n, c, h, w = image.shape
        if (h, w) != (self.config.height, self.config.width) or c != 3:
            raise ConfigurationError(
                f"image {image.shape} does not match model input 3x{self.config.height}x{self.config.width}"
            )
        pixel_logits = self.head(self.features(image, maps, mode))
        regional = sp_avg_pool(pixel_logits, maps)
        probs = activation(regional.values, "sigmoid")
        painted = np.stack([
            sp_paint(probs.data[regional.offsets[i]:regional.offsets[i + 1]], m)
            for i, m in enumerate(regional.maps)
        ])
        return SanetOutput(probs, regional.values, pixel_logits, painted, regional.offsets)

    __call__ = forward


def build_toy_sanet(config=ModelConfig()):
    return ToySANet(config)


def superpixel_ground_truth(masks, spmap, threshold=0.5):
    """q[i, k] = 1 iff at least ``threshold`` of region i is class-k foreground."""
    masks = np.asarray(masks)
    if masks.shape[1:] != spmap.labels.shape:
        raise ConfigurationError(f"mask extents {masks.shape[1:]} != map extents {spmap.labels.shape}")
    return (region_means(masks.astype(np.float64), spmap) >= threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# SANC checkpoints

CKPT_MAGIC = b"SANC"
CKPT_VERSION = 1
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_checkpoint(entries):
    """Serialize an ordered mapping of name -> float array."""
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = _DTYPE_TO_CODE.get(arr.dtype)
        if code is None:
            raise ConfigurationError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())
    return b"".join(out)


def decode_checkpoint(blob):
    if blob[:4] != CKPT_MAGIC:
        raise FormatError("bad magic, expected b'SANC'", 0)
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated while reading {what}", pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    entries = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _CODE_TO_DTYPE:
            raise FormatError(f"unknown dtype code {code}", pos - 2)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        dt = _CODE_TO_DTYPE[code]
        size = int(np.prod(shape)) if rank else 1
        data = take(size * dt.itemsize, f"values of {name}")
        entries[name] = np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(blob):
        raise FormatError("trailing bytes after last entry", pos)
    return entries


def model_state(model, step=None):
    entries = OrderedDict()
    for p in model.parameters():
        entries[p.name] = p.data
    for p in model.parameters():
        entries[p.name + ".m1"] = p.m1
        entries[p.name + ".m2"] = p.m2
    for bn in model.norms():
        if bn.stats.initialized:
            entries[bn.name + ".running_mean"] = bn.stats.mean
            entries[bn.name + ".running_var"] = bn.stats.var
    if step is not None:
        entries["optimizer.step"] = np.array(step, dtype=np.float64)
    return entries


def save_checkpoint(path, model, step=None):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model_state(model, step)))


def load_checkpoint(path, model):
    """Restore parameters, moments and running statistics; return the optimizer step."""
    with open(path, "rb") as fh:
        entries = decode_checkpoint(fh.read())
    for p in model.parameters():
        for suffix, attr in (("", "data"), (".m1", "m1"), (".m2", "m2")):
            key = p.name + suffix
            if key not in entries:
                raise FormatError(f"checkpoint lacks {key}", 0)
            arr = entries[key]
            if arr.shape != p.data.shape:
                raise ConfigurationError(f"{key}: checkpoint shape {arr.shape} != model {p.data.shape}")
            setattr(p, attr, arr.astype(p.data.dtype).copy())
    for bn in model.norms():
        key = bn.name + ".running_mean"
        if key in entries:
            bn.stats.mean = entries[key].astype(bn.stats.mean.dtype).copy()
            bn.stats.var = entries[bn.name + ".running_var"].astype(bn.stats.var.dtype).copy()
            bn.stats.initialized = True
    step = entries.get("optimizer.step")
    return int(step) if step is not None else 0
