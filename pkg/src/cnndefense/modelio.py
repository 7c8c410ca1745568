"""Self-contained binary model container.

Layout (all integers little-endian):

    magic    4s   b"LNCM"
    version  u16  currently 1
    ndim     u8   followed by ndim x u32 input dims
    nlabels  u16  followed by, per label, u16 byte length + UTF-8 bytes
    lastconv i32  index of the designated last conv layer, -1 if none
    nlayers  u16  followed by layer records

Layer records start with a kind byte (order of LAYER_KINDS), then:

    conv2d     out u32, in u32, kh u32, kw u32, stride u32, padding u32,
               weights f32[out*in*kh*kw], bias f32[out]
    maxpool2d  pool u32, stride u32
    dense      out u32, in u32, weights f32[out*in], bias f32[out]
    others     no payload

Weights are raw little-endian float32 blobs; ``load_model`` / ``save_model``
round-trip byte-exactly.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .engine import LAYER_KINDS, LayerSpec, ModelGraph, ShapeMismatchError

MAGIC = b"LNCM"
VERSION = 1


class ModelFormatError(ValueError):
    """Container bytes do not parse or fail validation."""


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ModelFormatError(f"truncated container at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def take_f32(self, count: int) -> np.ndarray:
        size = 4 * count
        if self.pos + size > len(self.buf):
            raise ModelFormatError(f"truncated weight blob at byte {self.pos}")
        arr = np.frombuffer(self.buf, dtype="<f4", count=count, offset=self.pos)
        self.pos += size
        return arr.copy()


def save_model(model: ModelGraph) -> bytes:
    out = [MAGIC, struct.pack("<H", VERSION)]
    out.append(struct.pack("<B", len(model.input_shape)))
    out.append(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    out.append(struct.pack("<H", len(model.labels)))
    for label in model.labels:
        raw = label.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
    out.append(struct.pack("<i", model.last_conv))
    out.append(struct.pack("<H", len(model.layers)))
    for layer in model.layers:
        out.append(struct.pack("<B", LAYER_KINDS.index(layer.kind)))
        if layer.kind == "conv2d":
            o, c, kh, kw = layer.weights.shape
            out.append(struct.pack("<6I", o, c, kh, kw, layer.stride, layer.padding))
            out.append(layer.weights.astype("<f4").tobytes())
            out.append(layer.bias.astype("<f4").tobytes())
        elif layer.kind == "maxpool2d":
            out.append(struct.pack("<2I", layer.pool, layer.stride))
        elif layer.kind == "dense":
            o, c = layer.weights.shape
            out.append(struct.pack("<2I", o, c))
            out.append(layer.weights.astype("<f4").tobytes())
            out.append(layer.bias.astype("<f4").tobytes())
    return b"".join(out)


def load_model(data: bytes) -> ModelGraph:
    cur = _Cursor(data)
    if cur.take("<4s") != MAGIC:
        raise ModelFormatError("bad magic; not a model container")
    version = cur.take("<H")
    if version != VERSION:
        raise ModelFormatError(f"unsupported container version {version}")
    ndim = cur.take("<B")
    if ndim < 1:
        raise ModelFormatError("input shape must have at least one dim")
    dims = cur.take(f"<{ndim}I")
    input_shape = tuple(dims) if ndim > 1 else (dims,)
    nlabels = cur.take("<H")
    labels = []
    for _ in range(nlabels):
        n = cur.take("<H")
        raw = cur.buf[cur.pos:cur.pos + n]
        if len(raw) != n:
            raise ModelFormatError("truncated label table")
        cur.pos += n
        labels.append(raw.decode("utf-8"))
    last_conv = cur.take("<i")
    nlayers = cur.take("<H")
    layers = []
    for i in range(nlayers):
        kind_idx = cur.take("<B")
        if kind_idx >= len(LAYER_KINDS):
            raise ModelFormatError(f"layer {i}: unknown kind byte {kind_idx}")
        kind = LAYER_KINDS[kind_idx]
        if kind == "conv2d":
            o, c, kh, kw, stride, padding = cur.take("<6I")
            w = cur.take_f32(o * c * kh * kw).reshape(o, c, kh, kw)
            b = cur.take_f32(o)
            layers.append(LayerSpec("conv2d", weights=w, bias=b, stride=stride, padding=padding))
        elif kind == "maxpool2d":
            pool, stride = cur.take("<2I")
            layers.append(LayerSpec("maxpool2d", pool=pool, stride=stride))
        elif kind == "dense":
            o, c = cur.take("<2I")
            w = cur.take_f32(o * c).reshape(o, c)
            b = cur.take_f32(o)
            layers.append(LayerSpec("dense", weights=w, bias=b))
        else:
            layers.append(LayerSpec(kind))
    if cur.pos != len(data):
        raise ModelFormatError(f"{len(data) - cur.pos} trailing bytes after layer table")
    has_conv = any(l.kind == "conv2d" for l in layers)
    if has_conv and last_conv == -1:
        raise ModelFormatError("missing last-conv designation")
    try:
        return ModelGraph(tuple(layers), input_shape, tuple(labels), last_conv)
    except (ShapeMismatchError, ValueError) as e:
        raise ModelFormatError(str(e)) from e


def model_fingerprint(model: ModelGraph) -> int:
    """64-bit fingerprint of the canonical serialized form."""
    digest = hashlib.blake2b(save_model(model), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def read_model(path) -> ModelGraph:
    with open(path, "rb") as f:
        return load_model(f.read())


def write_model(model: ModelGraph, path) -> None:
    with open(path, "wb") as f:
        f.write(save_model(model))
