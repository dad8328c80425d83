"""Little-endian binary model checkpoints.

Layout::

    magic      4 bytes  b"PLIN"
    version    u32      (currently 1)
    n_layers   u32
    input rank u32, then input dims as u32
    per layer:
        kind     u16 length + utf-8 bytes
        n_ints   u32, then descriptor ints as i32
        n_arrays u32, per array:
            name   u16 length + utf-8 bytes
            dtype  u8  (0 = float32, 1 = float64)
            rank   u32, dims as u32
            raw little-endian values, row-major

Arrays are the layer's parameters followed by its buffers (batch-norm running
statistics), each tagged with its name.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from pli_lab.errors import ConfigurationError
from pli_lab.nn.layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Flatten,
    Identity,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    Tanh,
)
from pli_lab.nn.network import Network

MAGIC = b"PLIN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _write_str(buf, s: str) -> None:
    raw = s.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_str(buf) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode()


def _arrays(layer: Layer) -> list[tuple[str, np.ndarray]]:
    return [(f"param:{k}", p.data) for k, p in layer.params.items()] + \
           [(f"buffer:{k}", v) for k, v in layer.buffers.items()]


def dumps(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(net.layers)))
    buf.write(struct.pack("<I", len(net.input_shape)))
    buf.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    for layer in net.layers:
        _write_str(buf, layer.kind)
        desc = layer.descriptor()
        buf.write(struct.pack("<I", len(desc)))
        buf.write(struct.pack(f"<{len(desc)}i", *desc))
        arrays = _arrays(layer)
        buf.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _write_str(buf, name)
            code = _DTYPE_CODES[arr.dtype]
            buf.write(struct.pack("<BI", code, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def _build(kind: str, desc: list[int], dtype) -> Layer:
    if kind == "conv2d":
        return Conv2d(*desc, dtype=dtype)
    if kind == "conv_transpose2d":
        return ConvTranspose2d(*desc, dtype=dtype)
    if kind == "batchnorm2d":
        return BatchNorm2d(*desc, dtype=dtype)
    if kind == "linear":
        return Linear(*desc, dtype=dtype)
    if kind == "maxpool2d":
        return MaxPool2d(*desc)
    simple = {"relu": ReLU, "tanh": Tanh, "flatten": Flatten, "identity": Identity}
    if kind in simple:
        return simple[kind]()
    raise ConfigurationError(f"unknown layer kind {kind!r} in checkpoint")


def loads(data: bytes, name: str = "net") -> Network:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise ConfigurationError("not a pli_lab checkpoint (bad magic)")
    version, n_layers = struct.unpack("<II", buf.read(8))
    if version != VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    (rank,) = struct.unpack("<I", buf.read(4))
    input_shape = struct.unpack(f"<{rank}I", buf.read(4 * rank))
    layers = []
    for _ in range(n_layers):
        kind = _read_str(buf)
        (n_ints,) = struct.unpack("<I", buf.read(4))
        desc = list(struct.unpack(f"<{n_ints}i", buf.read(4 * n_ints)))
        (n_arrays,) = struct.unpack("<I", buf.read(4))
        arrays = {}
        for _ in range(n_arrays):
            aname = _read_str(buf)
            code, ndim = struct.unpack("<BI", buf.read(5))
            shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            arrays[aname] = np.frombuffer(buf.read(dt.itemsize * count), dtype=dt).reshape(shape).copy()
        dtype = next(iter(arrays.values())).dtype.newbyteorder("=") if arrays else np.float32
        layer = _build(kind, desc, dtype)
        for aname, arr in arrays.items():
            section, key = aname.split(":", 1)
            if section == "param":
                layer.params[key].data = arr.astype(dtype)
            else:
                layer.buffers[key] = arr.astype(dtype)
        layers.append(layer)
    return Network(layers, tuple(input_shape), name=name)


def save(net: Network, path: str | Path) -> None:
    Path(path).write_bytes(dumps(net))


def load(path: str | Path) -> Network:
    return loads(Path(path).read_bytes(), name=Path(path).stem)
