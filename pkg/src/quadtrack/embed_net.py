"""The shared embedding branch: a conv/relu/maxpool chain with manual backprop."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc

MAGIC = b"QDNT"
VERSION = 1
_KINDS = ("conv", "relu", "maxpool")


class ModelFormatError(ValueError):
    """Raised for unreadable model files."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    size: int = 0  # kernel size for conv, window for maxpool
    stride: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def conv(out_channels: int, size: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv", out_channels, size, stride)


def pool(size: int = 3, stride: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", 0, size, stride)


RELU = LayerSpec("relu")


def alexnet_specs(channels: tuple[int, int, int, int, int]) -> list[LayerSpec]:
    c1, c2, c3, c4, c5 = channels
    return [
        conv(c1, 11, 2), RELU, pool(3, 2),
        conv(c2, 5, 1), RELU, pool(3, 2),
        conv(c3, 3), RELU,
        conv(c4, 3), RELU,
        conv(c5, 3),
    ]


REFERENCE_SPECS = alexnet_specs((96, 256, 192, 192, 128))
DESK_SPECS = alexnet_specs((16, 32, 32, 32, 16))
TOTAL_STRIDE = 8
EXEMPLAR_SIZE = 127
SEARCH_SIZE = 255


def output_size(specs: list[LayerSpec], size: int) -> int:
    """Spatial size after the chain, or a value < 1 if the input is too small."""
    for spec in specs:
        if spec.kind == "relu":
            continue
        if spec.size > size:
            return 0
        size = tc.conv_output_size(size, spec.size, spec.stride)
    return size


def min_input_size(specs: list[LayerSpec]) -> int:
    size = 1
    for spec in reversed(specs):
        if spec.kind != "relu":
            size = (size - 1) * spec.stride + spec.size
    return size


def total_stride(specs: list[LayerSpec]) -> int:
    return int(np.prod([s.stride for s in specs if s.kind != "relu"]))


@dataclass
class EmbedNet:
    specs: list[LayerSpec]
    params: list[np.ndarray]  # [W1, b1, W2, b2, ...] for conv layers in order
    score_bias: float = 0.0
    in_channels: int = 3
    _conv_index: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.params and self.params[0].dtype == np.float32:
            self.score_bias = float(np.float32(self.score_bias))
        self._conv_index = []
        k = 0
        for spec in self.specs:
            if spec.kind == "conv":
                self._conv_index.append(k)
                k += 1
            else:
                self._conv_index.append(-1)
        if len(self.params) != 2 * k:
            raise ValueError(f"expected {2 * k} parameter arrays for {k} conv layers, got {len(self.params)}")

    @property
    def dtype(self):
        return self.params[0].dtype

    def astype(self, dtype) -> "EmbedNet":
        return EmbedNet(self.specs, [p.astype(dtype) for p in self.params], float(self.score_bias), self.in_channels)

    def with_params(self, params: list[np.ndarray], score_bias: float) -> "EmbedNet":
        return EmbedNet(self.specs, params, float(score_bias), self.in_channels)

    def num_params(self) -> int:
        return sum(p.size for p in self.params) + 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbedNet):
            return NotImplemented
        return (
            self.specs == other.specs
            and self.in_channels == other.in_channels
            and self.score_bias == other.score_bias
            and len(self.params) == len(other.params)
            and all(a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.params, other.params))
        )


def init_params(specs: list[LayerSpec], rng_seed: int, in_channels: int = 3) -> EmbedNet:
    """He-normal conv kernels, zero biases, zero score bias."""
    rng = np.random.default_rng(rng_seed)
    params = []
    channels = in_channels
    for i, spec in enumerate(specs):
        if spec.kind == "conv":
            if spec.out_channels < 1 or spec.size < 1 or spec.stride < 1:
                raise ValueError(f"layer {i}: invalid conv spec {spec}")
            fan_in = channels * spec.size * spec.size
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.out_channels, channels, spec.size, spec.size))
            params += [w.astype(tc.DTYPE), np.zeros(spec.out_channels, dtype=tc.DTYPE)]
            channels = spec.out_channels
        elif spec.kind == "maxpool":
            if spec.size < 1 or spec.stride < 1:
                raise ValueError(f"layer {i}: invalid pool spec {spec}")
        elif i == 0:
            raise ValueError("layer 0: chain must start with a conv or pool layer")
    if not params:
        raise ValueError("layer chain contains no conv layer")
    return EmbedNet(list(specs), params, 0.0, in_channels)


@dataclass
class ForwardCache:
    net_id: int
    inputs: list[np.ndarray]
    argmax: list[np.ndarray | None]


def forward(net: EmbedNet, image: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the chain on a (N, C, H, W) batch (or a single (C, H, W) image)."""
    x = image[None] if image.ndim == 3 else image
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise tc.ShapeError(f"expected image with {net.in_channels} channels, got shape {image.shape}")
    need = min_input_size(net.specs)
    if x.shape[2] < need or x.shape[3] < need:
        raise tc.ShapeError(f"image {image.shape} smaller than the network minimum {need}x{need}")
    x = x.astype(net.dtype, copy=False)
    inputs, argmaxes = [], []
    for spec, ci in zip(net.specs, net._conv_index):
        inputs.append(x)
        if spec.kind == "conv":
            x = tc.conv2d(x, net.params[2 * ci], net.params[2 * ci + 1], spec.stride)
            argmaxes.append(None)
        elif spec.kind == "relu":
            x = tc.relu(x)
            argmaxes.append(None)
        else:
            x, am = tc.max_pool(x, spec.size, spec.stride)
            argmaxes.append(am)
    return x, ForwardCache(id(net), inputs, argmaxes)


def embed(net: EmbedNet, image: np.ndarray) -> np.ndarray:
    return forward(net, image)[0]


def backward(net: EmbedNet, cache: ForwardCache, upstream: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients (same layout as ``net.params``) summed over the batch."""
    if cache.net_id != id(net) or len(cache.inputs) != len(net.specs):
        raise ValueError("forward cache does not belong to this network")
    grads: list[np.ndarray | None] = [None] * len(net.params)
    g = upstream
    for i in reversed(range(len(net.specs))):
        spec, ci, x, am = net.specs[i], net._conv_index[i], cache.inputs[i], cache.argmax[i]
        if spec.kind == "conv":
            g_in, gw, gb = tc.conv2d_grad(x, net.params[2 * ci], g, spec.stride, need_input_grad=i > 0)
            grads[2 * ci], grads[2 * ci + 1] = gw, gb
            if g_in is None:
                break
            g = g_in
        elif spec.kind == "relu":
            g = tc.relu_grad(x, g)
        else:
            g = tc.max_pool_grad(x.shape, am, g)
    return grads  # type: ignore[return-value]


def save(net: EmbedNet, path: str | Path) -> None:
    """Write ``QDNT`` v1: header, fixed layer records, little-endian f32 blocks, score bias.

    Each layer record is five u32: kind, in_channels, out_channels, size, stride.
    """
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(net.specs))
    channels = net.in_channels
    for spec in net.specs:
        in_ch = channels if spec.kind == "conv" else 0
        out += struct.pack("<IIIII", _KINDS.index(spec.kind), in_ch, spec.out_channels, spec.size, spec.stride)
        if spec.kind == "conv":
            channels = spec.out_channels
    for p in net.params:
        out += np.ascontiguousarray(p, dtype="<f4").tobytes()
    out += struct.pack("<f", net.score_bias)
    Path(path).write_bytes(bytes(out))


def load(path: str | Path) -> EmbedNet:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ModelFormatError(f"{path}: truncated model file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, n_layers = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    specs, in_chs = [], []
    for _ in range(n_layers):
        kind, in_ch, oc, size, stride = struct.unpack("<IIIII", take(20))
        if kind >= len(_KINDS):
            raise ModelFormatError(f"{path}: unknown layer kind {kind}")
        specs.append(LayerSpec(_KINDS[kind], oc, size, stride))
        if kind == 0:
            in_chs.append(in_ch)
    if not in_chs:
        raise ModelFormatError(f"{path}: model has no conv layer")
    params = []
    for spec, channels in zip([s for s in specs if s.kind == "conv"], in_chs):
        shape = (spec.out_channels, channels, spec.size, spec.size)
        n = int(np.prod(shape))
        params.append(np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(tc.DTYPE))
        params.append(np.frombuffer(take(4 * spec.out_channels), dtype="<f4").astype(tc.DTYPE))
    (bias,) = struct.unpack("<f", take(4))
    if pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - pos} trailing bytes after model data")
    return EmbedNet(specs, params, float(bias), in_chs[0])
