"""MLP embedding function and the FSCK checkpoint format.

The encoder is a stack of affine layers with leaky-ReLU between them; the
last layer is affine only, so its output is the embedding.

FSCK layout (all little-endian)::

    b"FSCK" | u32 version
    u32 input_dim | u32 n_hidden | n_hidden x u32 | u32 embed_dim | f32 slope
    per layer: weight (fan_in x fan_out, row-major f32), bias (fan_out f32)
    u32 n_sections, then per section: 4-byte tag | u32 nbytes | payload

Sections carry whatever travels with the encoder (temperature, heads,
optimizer and training state); see ``pipelines``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from . import tensor as T
from .rng import RandomStream
from .tensor import DimensionError, Tensor

MAGIC = b"FSCK"
VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    slope: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"layer widths must be >= 1: {self}")
        if self.embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {self.embed_dim}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.embed_dim)


@dataclass
class EncoderParams:
    spec: EncoderSpec
    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def __post_init__(self):
        dims = self.spec.dims
        if len(self.layers) != len(dims) - 1:
            raise ValueError(f"expected {len(dims) - 1} layers, got {len(self.layers)}")
        for i, (w, b) in enumerate(self.layers):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}/{b.shape}, descriptor wants "
                                 f"{(dims[i], dims[i + 1])}/{(dims[i + 1],)}")

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def weights(self) -> list[Tensor]:
        return [w for w, _ in self.layers]

    @property
    def num_params(self) -> int:
        return int(np.sum([t.data.size for t in self.tensors()]))

    def copy(self, requires_grad: bool | None = None) -> EncoderParams:
        layers = []
        for w, b in self.layers:
            rw = w.requires_grad if requires_grad is None else requires_grad
            layers.append((Tensor(w.data.copy(), requires_grad=rw),
                           Tensor(b.data.copy(), requires_grad=rw)))
        return EncoderParams(self.spec, layers)

    def astype(self, dtype) -> EncoderParams:
        layers = [(Tensor(w.data.astype(dtype), requires_grad=w.requires_grad),
                   Tensor(b.data.astype(dtype), requires_grad=b.requires_grad))
                  for w, b in self.layers]
        return EncoderParams(self.spec, layers)


def init_params(spec: EncoderSpec, seed: int | RandomStream, dtype=np.float32) -> EncoderParams:
    """Glorot-uniform weights, zero biases."""
    stream = seed if isinstance(seed, RandomStream) else RandomStream.from_seed(seed).child("init")
    dims = spec.dims
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        s = np.sqrt(6.0 / (fan_in + fan_out))
        u = stream.child("layer", i).uniform(fan_in * fan_out)
        w = ((2.0 * u - 1.0) * s).reshape(fan_in, fan_out).astype(dtype)
        layers.append((Tensor(w, requires_grad=True),
                       Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)))
    return EncoderParams(spec, layers)


def forward(params: EncoderParams, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=params.layers[0][0].dtype))
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise DimensionError(f"encoder expects (B, {params.spec.input_dim}) input, got {x.shape}")
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        x = T.add_bias(T.matmul(x, w), b)
        if i < last:
            x = T.leaky_relu(x, params.spec.slope)
    return x


def embed(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    """Forward pass on a plain array without building a graph."""
    with T.no_grad():
        return forward(params, batch).data


# -- checkpoint ----------------------------------------------------------------


def encode_checkpoint(params: EncoderParams, sections: dict[str, bytes] | None = None) -> bytes:
    spec = params.spec
    out = [MAGIC, binio.u32(VERSION), binio.u32(spec.input_dim), binio.u32(len(spec.hidden_dims))]
    out += [binio.u32(h) for h in spec.hidden_dims]
    out += [binio.u32(spec.embed_dim), binio.f32(spec.slope)]
    for w, b in params.layers:
        out += [binio.f32_array(w.data), binio.f32_array(b.data)]
    sections = sections or {}
    out.append(binio.u32(len(sections)))
    for tag, payload in sections.items():
        raw_tag = tag.encode("ascii")
        if len(raw_tag) != 4:
            raise ValueError(f"section tag must be 4 ASCII bytes, got {tag!r}")
        out += [raw_tag, binio.u32(len(payload)), payload]
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> tuple[EncoderParams, dict[str, bytes]]:
    r = binio.Reader(buf)
    magic = r.raw(4, "magic")
    if magic != MAGIC:
        raise binio.FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise binio.FormatError(f"unsupported checkpoint version {version}", 4)
    input_dim = r.u32("input_dim")
    hidden = tuple(r.u32("hidden dim") for _ in range(r.u32("hidden count")))
    embed_dim = r.u32("embed_dim")
    slope = r.f32("slope")
    try:
        spec = EncoderSpec(input_dim, hidden, embed_dim, slope)
    except ValueError as exc:
        raise binio.FormatError(f"invalid architecture descriptor: {exc}", r.pos) from None
    dims = spec.dims
    layers = []
    for i in range(len(dims) - 1):
        w = r.f32_array(dims[i] * dims[i + 1], f"layer {i} weight").reshape(dims[i], dims[i + 1])
        b = r.f32_array(dims[i + 1], f"layer {i} bias")
        layers.append((Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
    sections = {}
    for _ in range(r.u32("section count")):
        tag = r.raw(4, "section tag").decode("ascii", errors="replace")
        sections[tag] = r.raw(r.u32("section length"), f"section {tag}")
    if not r.at_end():
        raise binio.FormatError("trailing bytes after last section", r.pos)
    return EncoderParams(spec, layers), sections


def save_checkpoint(path, params: EncoderParams, sections: dict[str, bytes] | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, sections))


def load_checkpoint(path) -> tuple[EncoderParams, dict[str, bytes]]:
    return decode_checkpoint(Path(path).read_bytes())
