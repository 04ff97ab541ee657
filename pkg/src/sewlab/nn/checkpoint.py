"""Binary checkpoint format.

Layout (all integers u32 little-endian)::

    b"SEWCKPT1" | version | layer_count | input C, H, W
    per layer:  type tag | extent count | extents...
    payload:    float32 LE weight then bias for each parametric layer

Type tags: 1 conv2d (out, in, k, k), 2 dense (out, in), 3 relu, 4 flatten.
"""

import struct

import numpy as np

from sewlab.errors import (
    CheckpointVersionError,
    FormatError,
    NotACheckpointError,
    TruncatedFileError,
)
from sewlab.nn.layers import LAYER_TYPES, Conv2d, Dense, Flatten, Network, ReLU

MAGIC = b"SEWCKPT1"
VERSION = 1
_F32 = np.dtype("<f4")


def header_size(net):
    size = len(MAGIC) + 4 + 4 + 12
    for layer in net.layers:
        size += 8 + 4 * len(layer.extents())
    return size


def encode(net):
    out = [MAGIC, struct.pack("<II", VERSION, len(net.layers))]
    out.append(struct.pack("<III", *net.input_shape))
    for layer in net.layers:
        ext = layer.extents()
        out.append(struct.pack(f"<II{len(ext)}I", layer.tag, len(ext), *ext))
    for p in net.parameters():
        if not np.all(np.isfinite(p.data)):
            raise ValueError("refusing to save a network with non-finite parameters")
        out.append(np.ascontiguousarray(p.data, dtype=_F32).tobytes())
    return b"".join(out)


def save_checkpoint(net, path):
    with open(path, "wb") as fh:
        fh.write(encode(net))


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise TruncatedFileError(f"checkpoint truncated while reading {what}")
    return buf[pos:pos + n], pos + n


def decode(buf):
    if buf[:len(MAGIC)] != MAGIC:
        raise NotACheckpointError("not a checkpoint: bad magic bytes")
    pos = len(MAGIC)
    raw, pos = _take(buf, pos, 8, "header")
    version, n_layers = struct.unpack("<II", raw)
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this reader supports {VERSION}"
        )
    raw, pos = _take(buf, pos, 12, "input shape")
    input_shape = struct.unpack("<III", raw)
    layers = []
    for i in range(n_layers):
        raw, pos = _take(buf, pos, 8, f"layer {i} descriptor")
        tag, n_ext = struct.unpack("<II", raw)
        raw, pos = _take(buf, pos, 4 * n_ext, f"layer {i} extents")
        ext = struct.unpack(f"<{n_ext}I", raw)
        cls = LAYER_TYPES.get(tag)
        if cls is None:
            raise FormatError(f"unknown layer type tag {tag}")
        if cls is Conv2d:
            if len(ext) != 4 or ext[2] != ext[3]:
                raise FormatError(f"bad conv2d extents {ext}")
            layers.append(Conv2d(ext[1], ext[0], ext[2]))
        elif cls is Dense:
            if len(ext) != 2:
                raise FormatError(f"bad dense extents {ext}")
            layers.append(Dense(ext[1], ext[0]))
        else:
            layers.append(ReLU() if cls is ReLU else Flatten())
    net = Network(input_shape, layers)
    for i, p in enumerate(net.parameters()):
        nbytes = p.data.size * 4
        raw, pos = _take(buf, pos, nbytes, f"parameter payload {i}")
        p.data = np.frombuffer(raw, dtype=_F32).astype(np.float32).reshape(p.shape)
        p.grad = np.zeros_like(p.data)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after parameter payload")
    return net


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
