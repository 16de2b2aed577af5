"""Binary model persistence.

One file per model: magic ``GSNN``, a u16 format version, a little-endian
u32 architecture descriptor (input dims, class count, layer tags + dims),
then every parameter tensor as little-endian float64 in declaration order
(weights before bias, layers in stack order).  Loading validates magic,
version, and the full shape chain before touching parameter bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import Architecture, Conv2d, Dense, Flatten, MaxPool2x2, Relu, TrainedModel

MAGIC = b"GSNN"
VERSION = 1

_TAG_DENSE = 1
_TAG_CONV2D = 2
_TAG_RELU = 3
_TAG_MAXPOOL = 4
_TAG_FLATTEN = 5


def save_model(model: TrainedModel, path) -> Path:
    path = Path(path)
    arch = model.architecture
    parts = [MAGIC, struct.pack("<H", VERSION)]
    parts.append(struct.pack("<3I", *arch.input_shape))
    parts.append(struct.pack("<I", arch.num_classes))
    parts.append(struct.pack("<I", len(arch.layers)))
    for layer in arch.layers:
        if isinstance(layer, Dense):
            parts.append(struct.pack("<2I", _TAG_DENSE, layer.out_units))
        elif isinstance(layer, Conv2d):
            parts.append(struct.pack("<4I", _TAG_CONV2D, layer.kernel_h, layer.kernel_w, layer.out_channels))
        elif isinstance(layer, Relu):
            parts.append(struct.pack("<I", _TAG_RELU))
        elif isinstance(layer, MaxPool2x2):
            parts.append(struct.pack("<I", _TAG_MAXPOOL))
        elif isinstance(layer, Flatten):
            parts.append(struct.pack("<I", _TAG_FLATTEN))
        else:
            raise ValueError(f"cannot serialize layer {layer!r}")
    for entry in model.params:
        if entry is None:
            continue
        w, b = entry
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated model file (wanted {n} bytes at offset {self.off})")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_model(path, name: str | None = None, training_kind: str = "normal",
               train_accuracy: float = float("nan")) -> TrainedModel:
    """Load a GSNN model file; metadata (name/kind) comes from the caller."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u16()
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}, expected {VERSION}")
    input_shape = (r.u32(), r.u32(), r.u32())
    num_classes = r.u32()
    n_layers = r.u32()
    layers = []
    for i in range(n_layers):
        tag = r.u32()
        if tag == _TAG_DENSE:
            layers.append(Dense(r.u32()))
        elif tag == _TAG_CONV2D:
            layers.append(Conv2d(r.u32(), r.u32(), r.u32()))
        elif tag == _TAG_RELU:
            layers.append(Relu())
        elif tag == _TAG_MAXPOOL:
            layers.append(MaxPool2x2())
        elif tag == _TAG_FLATTEN:
            layers.append(Flatten())
        else:
            raise ValueError(f"{path}: invalid layer tag {tag} at layer {i}")
    arch = Architecture(input_shape, tuple(layers), num_classes)  # validates shape chain

    params = []
    shape = arch.input_shape
    for layer, out_shape in zip(arch.layers, arch.output_shapes()):
        if isinstance(layer, Dense):
            w_shape = (layer.out_units, shape[0])
            b_shape = (layer.out_units,)
        elif isinstance(layer, Conv2d):
            w_shape = (layer.out_channels, shape[0], layer.kernel_h, layer.kernel_w)
            b_shape = (layer.out_channels,)
        else:
            params.append(None)
            shape = out_shape
            continue
        w = np.frombuffer(r.take(8 * int(np.prod(w_shape))), dtype="<f8").reshape(w_shape)
        b = np.frombuffer(r.take(8 * b_shape[0]), dtype="<f8")
        params.append((w.astype(np.float64), b.astype(np.float64)))
        shape = out_shape
    if r.off != len(r.blob):
        raise ValueError(f"{path}: {len(r.blob) - r.off} trailing bytes after parameters")
    return TrainedModel(arch, tuple(params), name=name or path.stem,
                        training_kind=training_kind, train_accuracy=train_accuracy)
