"""U-Net segmentation classifier and image generator built on :mod:`jsynth.tensor`."""

from __future__ import annotations

import enum
import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

MAGIC = b"JSYN"
FORMAT_VERSION = 1
INNER_SLOPE = 0.01
GENERATOR_SLOPE = 0.2


class Activation(enum.IntEnum):
    SIGMOID = 0
    LEAKY_RELU = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2
    out_channels: int = 1
    depth: int = 3
    base_filters: int = 16
    final_activation: Activation = Activation.SIGMOID
    leaky_slope: float = GENERATOR_SLOPE

    def validate(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.in_channels not in (1, 2):
            raise ValueError(f"in_channels must be 1 or 2, got {self.in_channels}")
        if self.out_channels != 1:
            raise ValueError(f"out_channels must be 1, got {self.out_channels}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth


class _Conv:
    def __init__(self, cin, cout, k, rng):
        fan_in = cin * k * k
        bound = np.sqrt(3.0) * np.sqrt(2.0 / fan_in)  # uniform with std sqrt(2/fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.padding = k // 2

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class _ConvBNAct:
    """conv3x3 -> batch norm -> leaky ReLU."""

    def __init__(self, cin, cout, rng):
        self.conv = _Conv(cin, cout, 3, rng)
        self.gamma = Tensor(np.ones(cout), requires_grad=True)
        self.beta = Tensor(np.zeros(cout), requires_grad=True)
        self.bn = BatchNormState(cout)

    def __call__(self, x, training, update_stats):
        y = self.conv(x)
        y = T.batch_norm2d(y, self.gamma, self.beta, self.bn, training=training, update_stats=update_stats)
        return T.leaky_relu(y, INNER_SLOPE)


class Network:
    """A U-Net with same-padding convolutions.

    Level ``i`` of the encoder runs two conv-BN-LeakyReLU units with
    ``base_filters * 2**i`` channels before 2x2 max pooling. The decoder
    upsamples by nearest neighbour, applies one conv unit, concatenates the
    matching encoder output and runs two more conv units. A 1x1 conv and the
    configured final activation produce the single output channel.
    """

    def __init__(self, config: UNetConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.training = True
        rng = np.random.default_rng(seed)
        f = [config.base_filters * 2 ** i for i in range(config.depth + 1)]
        self.encoder = []
        cin = config.in_channels
        for i in range(config.depth):
            self.encoder.append((_ConvBNAct(cin, f[i], rng), _ConvBNAct(f[i], f[i], rng)))
            cin = f[i]
        self.bottleneck = (_ConvBNAct(f[-2], f[-1], rng), _ConvBNAct(f[-1], f[-1], rng))
        self.decoder = []
        for i in reversed(range(config.depth)):
            self.decoder.append((
                _ConvBNAct(f[i + 1], f[i], rng),
                _ConvBNAct(2 * f[i], f[i], rng),
                _ConvBNAct(f[i], f[i], rng),
            ))
        self.head = _Conv(f[0], config.out_channels, 1, rng)

    def _units(self):
        for pair in self.encoder:
            yield from pair
        yield from self.bottleneck
        for triple in self.decoder:
            yield from triple

    def parameters(self) -> list[Tensor]:
        """Learnable tensors in declaration order."""
        out = []
        for u in self._units():
            out += [u.conv.weight, u.conv.bias, u.gamma, u.beta]
        out += [self.head.weight, self.head.bias]
        return out

    def state_arrays(self) -> list[np.ndarray]:
        """Every stored array (parameters and running stats) in declaration order."""
        out = []
        for u in self._units():
            out += [u.conv.weight.data, u.conv.bias.data, u.gamma.data, u.beta.data,
                    u.bn.running_mean, u.bn.running_var]
        out += [self.head.weight.data, self.head.bias.data]
        return out

    def load_state_arrays(self, arrays):
        arrays = list(arrays)
        slots = []
        for u in self._units():
            slots += [(u.conv.weight, "data"), (u.conv.bias, "data"), (u.gamma, "data"), (u.beta, "data"),
                      (u.bn, "running_mean"), (u.bn, "running_var")]
        slots += [(self.head.weight, "data"), (self.head.bias, "data")]
        if len(arrays) != len(slots):
            raise CheckpointError(f"expected {len(slots)} arrays, got {len(arrays)}")
        for (obj, attr), arr in zip(slots, arrays):
            cur = getattr(obj, attr)
            if cur.shape != arr.shape:
                raise CheckpointError(f"array shape {arr.shape} does not match {cur.shape}")
            setattr(obj, attr, np.array(arr, dtype=T.DTYPE, copy=True))

    def snapshot(self) -> list[np.ndarray]:
        return [a.copy() for a in self.state_arrays()]

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for a in self.state_arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def requires_grad_(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, x, update_stats: bool = True, drop_skip: int | None = None) -> Tensor:
        """Run the network on an (N, C, H, W) batch.

        ``update_stats=False`` uses batch statistics in training mode without
        touching the running averages. ``drop_skip`` zeroes the skip
        connection of the given encoder level (diagnostics only).
        """
        x = T.as_tensor(x)
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise T.ShapeError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
        h, w = x.shape[2:]
        if h % cfg.divisor or w % cfg.divisor:
            raise T.ShapeError(f"spatial dims {h}x{w} must be divisible by {cfg.divisor} (2**depth)")
        tr, up = self.training, update_stats and self.training
        skips = []
        for a, b in self.encoder:
            x = b(a(x, tr, up), tr, up)
            skips.append(x)
            x = T.max_pool2d(x, 2)
        a, b = self.bottleneck
        x = b(a(x, tr, up), tr, up)
        for level, (upc, a, b) in zip(reversed(range(cfg.depth)), self.decoder):
            x = upc(T.upsample_nearest2(x), tr, up)
            skip = skips[level]
            if drop_skip == level:
                skip = Tensor(np.zeros_like(skip.data))
            x = b(a(T.concat_channels(skip, x), tr, up), tr, up)
        x = self.head(x)
        if cfg.final_activation == Activation.SIGMOID:
            return T.sigmoid(x)
        return T.leaky_relu(x, cfg.leaky_slope)

    __call__ = forward


def build_classifier(config: UNetConfig, seed: int = 0) -> Network:
    if config.final_activation != Activation.SIGMOID:
        raise ValueError("classifier needs a sigmoid final activation")
    return Network(config, seed)


def build_generator(config: UNetConfig, seed: int = 0) -> Network:
    if config.in_channels != 1:
        raise ValueError(f"generator takes one input channel, got {config.in_channels}")
    if config.final_activation != Activation.LEAKY_RELU:
        raise ValueError("generator needs a LeakyReLU final activation")
    return Network(config, seed)


def classifier_config(in_channels: int = 2, depth: int = 3, base_filters: int = 16) -> UNetConfig:
    return UNetConfig(in_channels, 1, depth, base_filters, Activation.SIGMOID, GENERATOR_SLOPE)


def generator_config(depth: int = 3, base_filters: int = 16, slope: float = GENERATOR_SLOPE) -> UNetConfig:
    return UNetConfig(1, 1, depth, base_filters, Activation.LEAKY_RELU, slope)


# ---------------------------------------------------------------- checkpoint file
#
# "JSYN" | u32 version | u32 in, out, depth, base_filters, activation | f64 slope
# | f64 arrays in declaration order, little-endian

_HEADER = struct.Struct("<4sIIIIIId")


def dumps(net: Network) -> bytes:
    c = net.config
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, c.in_channels, c.out_channels, c.depth,
                           c.base_filters, int(c.final_activation), c.leaky_slope))
    for a in net.state_arrays():
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> Network:
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint truncated in header")
    magic, version, cin, cout, depth, base, act, slope = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = UNetConfig(cin, cout, depth, base, Activation(act), slope)
    except ValueError as exc:
        raise CheckpointError(f"bad activation code {act}") from exc
    net = Network(config, seed=0)
    shapes = [a.shape for a in net.state_arrays()]
    need = sum(int(np.prod(s)) for s in shapes) * 8
    body = blob[_HEADER.size:]
    if len(body) != need:
        raise CheckpointError(f"checkpoint body has {len(body)} bytes, expected {need}")
    flat = np.frombuffer(body, dtype="<f8")
    arrays, off = [], 0
    for s in shapes:
        k = int(np.prod(s))
        arrays.append(flat[off:off + k].reshape(s))
        off += k
    net.load_state_arrays(arrays)
    net.eval()
    return net


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(dumps(net))


def load_checkpoint(path) -> Network:
    return loads(Path(path).read_bytes())
