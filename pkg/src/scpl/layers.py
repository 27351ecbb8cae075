"""Parameterized building blocks and the binary parameter container.

Layers hold :class:`Parameter` objects and run on an optional :class:`Tape`.
With ``tape=None`` the forward pass is recorded nowhere (inference).

Parameter container layout (all integers little-endian)::

    magic    8 bytes   b"SCPLPARM"
    version  u32       1
    header   u32 n, then n bytes of UTF-8 JSON (free-form metadata)
    count    u32       number of records
    record   u16 name length, name (UTF-8), u8 ndim, ndim x u64 dims,
             prod(dims) x f64 values in row-major order
"""

from __future__ import annotations

import io
import json
import math
import struct
from typing import BinaryIO, Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

MAGIC = b"SCPLPARM"
FORMAT_VERSION = 1

PROJECTION_HIDDEN = 512
PROJECTION_OUT = 1024


class Parameter:
    """A named trainable array. ``value`` stays ``None`` until initialized."""

    __slots__ = ("name", "shape", "value", "fan_in", "is_bias")

    def __init__(self, name: str, shape: tuple, fan_in: int, is_bias: bool = False):
        self.name = name
        self.shape = tuple(int(s) for s in shape)
        self.fan_in = fan_in
        self.is_bias = is_bias
        self.value: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _p(tape: Optional[Tape], p: Parameter) -> Tensor:
    if p.value is None:
        raise RuntimeError(f"parameter {p.name!r} is not initialized")
    return tape.param(p) if tape is not None else Tensor(p.value)


class Layer:
    def params(self) -> list[Parameter]:
        return []

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, tape=None):
        return self.forward(ad.as_tensor(x), tape)

    def rename(self, prefix: str) -> "Layer":
        for p in self.params():
            p.name = f"{prefix}.{p.name}"
        return self


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int):
        if in_features < 1 or out_features < 1:
            raise ValueError(f"invalid linear dims {in_features}->{out_features}")
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter("weight", (out_features, in_features), in_features)
        self.bias = Parameter("bias", (out_features,), in_features, is_bias=True)

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, tape=None):
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise ad.ShapeError(f"Linear({self.in_features}, {self.out_features}) got input {x.shape}")
        return ad.matmul(x, ad.transpose(_p(tape, self.weight))) + _p(tape, self.bias)

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features})"


class Conv2d(Layer):
    """3x3 kernels, stride 1, padding 1: spatial size is preserved."""

    kernel_size = 3

    def __init__(self, in_channels: int, out_channels: int):
        if in_channels < 1 or out_channels < 1:
            raise ValueError(f"invalid conv channels {in_channels}->{out_channels}")
        self.in_channels, self.out_channels = in_channels, out_channels
        k = self.kernel_size
        fan_in = in_channels * k * k
        self.weight = Parameter("weight", (out_channels, in_channels, k, k), fan_in)
        self.bias = Parameter("bias", (out_channels,), fan_in, is_bias=True)

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, tape=None):
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ad.ShapeError(f"Conv2d({self.in_channels}, {self.out_channels}) got input {x.shape}")
        return ad.conv2d(x, _p(tape, self.weight), _p(tape, self.bias))

    def __repr__(self):
        return f"Conv2d({self.in_channels}, {self.out_channels}, kernel=3, padding=1)"


class ReLU(Layer):
    def forward(self, x, tape=None):
        return ad.relu(x)

    def __repr__(self):
        return "ReLU()"


class LeakyReLU(Layer):
    def forward(self, x, tape=None):
        return ad.leaky_relu(x)

    def __repr__(self):
        return "LeakyReLU()"


class Tanh(Layer):
    def forward(self, x, tape=None):
        return ad.tanh(x)

    def __repr__(self):
        return "Tanh()"


class Flatten(Layer):
    def forward(self, x, tape=None):
        return ad.reshape(x, (x.shape[0], -1))

    def __repr__(self):
        return "Flatten()"


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, tape=None):
        for layer in self.layers:
            x = layer.forward(x, tape)
        return x

    def rename(self, prefix):
        for i, layer in enumerate(self.layers):
            layer.rename(f"{prefix}.{i}")
        return self

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"


class ProjectionHead(Sequential):
    """Maps encoder output to the contrastive embedding (training only).

    ``identity`` passes inputs through (flattened), ``linear`` is a single
    Linear(dim, out_dim), ``mlp`` is Linear(dim, hidden)-ReLU-Linear(hidden, out_dim).
    """

    KINDS = ("identity", "linear", "mlp")

    def __init__(self, kind: str, dim: int, hidden: int = PROJECTION_HIDDEN, out_dim: int = PROJECTION_OUT):
        if kind not in self.KINDS:
            raise ValueError(f"unknown projection head kind {kind!r}; expected one of {self.KINDS}")
        self.kind = kind
        self.dim = dim
        if kind == "identity":
            layers = [Flatten()]
        elif kind == "linear":
            layers = [Flatten(), Linear(dim, out_dim)]
        else:
            layers = [Flatten(), Linear(dim, hidden), ReLU(), Linear(hidden, out_dim)]
        super().__init__(*layers)

    def __repr__(self):
        return f"ProjectionHead({self.kind}, " + super().__repr__() + ")"


def init_params(layer: Layer, seed) -> None:
    """Weights ~ U(-s, s) with s = sqrt(1/fan_in); biases zero. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    for p in layer.params():
        if p.is_bias:
            p.value = np.zeros(p.shape)
        else:
            s = math.sqrt(1.0 / p.fan_in)
            p.value = rng.uniform(-s, s, size=p.shape)


# ---------------------------------------------------------------------------
# binary parameter container


def write_params(f: BinaryIO, params: Iterable[Parameter], header: Optional[dict] = None) -> None:
    params = list(params)
    meta = json.dumps(header or {}, sort_keys=True).encode()
    f.write(MAGIC)
    f.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
    f.write(meta)
    f.write(struct.pack("<I", len(params)))
    for p in params:
        if p.value is None:
            raise RuntimeError(f"cannot save uninitialized parameter {p.name!r}")
        name = p.name.encode()
        f.write(struct.pack("<H", len(name)))
        f.write(name)
        f.write(struct.pack("<B", len(p.shape)))
        f.write(struct.pack(f"<{len(p.shape)}Q", *p.shape))
        f.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated parameter container: wanted {n} bytes, got {len(buf)}")
    return buf


def read_params(f: BinaryIO) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, {name: array})`` in file order."""
    if _read_exact(f, len(MAGIC)) != MAGIC:
        raise ValueError("bad magic: not a parameter container")
    version, hlen = struct.unpack("<II", _read_exact(f, 8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    header = json.loads(_read_exact(f, hlen).decode())
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, nlen).decode()
        (ndim,) = struct.unpack("<B", _read_exact(f, 1))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
        n = math.prod(shape)
        out[name] = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    return header, out


def params_to_bytes(params: Iterable[Parameter], header: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    write_params(buf, params, header)
    return buf.getvalue()
