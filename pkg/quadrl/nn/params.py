"""
Versioned network parameters and their wire blob.

Blob layout (little-endian):
    u64 version, u32 layer count, then per layer
    u8 kind, u8 stride, u8 weight ndim, u32 dims..., u8 bias ndim, u32 dims...,
    weight float32 payload, bias float32 payload
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from quadrl.domain.errors import ShapeError

KIND_CODES = {"conv": 1, "dense": 2}
_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


@dataclass
class LayerParams:
    kind: str
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def copy(self) -> "LayerParams":
        return LayerParams(self.kind, self.weight.copy(), self.bias.copy(), self.stride)


@dataclass
class NetParams:
    version: int = 0
    layers: List[LayerParams] = field(default_factory=list)

    def copy(self) -> "NetParams":
        return NetParams(self.version, [layer.copy() for layer in self.layers])

    def astype(self, dtype) -> "NetParams":
        return NetParams(
            self.version,
            [LayerParams(l.kind, l.weight.astype(dtype), l.bias.astype(dtype), l.stride) for l in self.layers],
        )

    def tensors(self) -> List[np.ndarray]:
        """Weights and biases in layer order: [w0, b0, w1, b1, ...]."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def shape_table(self) -> List[Tuple[str, Tuple[int, ...], Tuple[int, ...]]]:
        return [(l.kind, tuple(l.weight.shape), tuple(l.bias.shape)) for l in self.layers]

    @property
    def size(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def assign_flat(self, vec: np.ndarray) -> None:
        if vec.shape != (self.size,):
            raise ShapeError(f"flat vector has {vec.shape}, params need ({self.size},)")
        pos = 0
        for t in self.tensors():
            t[...] = vec[pos:pos + t.size].reshape(t.shape)
            pos += t.size

    def equal(self, other: "NetParams") -> bool:
        if self.version != other.version or self.shape_table() != other.shape_table():
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors()))

    # ── blob ──

    def to_blob(self) -> bytes:
        parts = [struct.pack("<QI", int(self.version), len(self.layers))]
        for l in self.layers:
            parts.append(struct.pack("<BB", KIND_CODES[l.kind], int(l.stride)))
            for arr in (l.weight, l.bias):
                parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(l.weight, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(l.bias, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_blob(cls, blob: bytes) -> "NetParams":
        mv = memoryview(blob)
        pos = 0

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(mv):
                raise ShapeError(f"parameter blob truncated at byte {pos} (need {n} more)")
            out = mv[pos:pos + n]
            pos += n
            return out

        version, count = struct.unpack("<QI", take(12))
        layers = []
        for _ in range(count):
            kind_code, stride = struct.unpack("<BB", take(2))
            if kind_code not in _KIND_NAMES:
                raise ShapeError(f"unknown layer kind code {kind_code}")
            shapes = []
            for _arr in range(2):
                (ndim,) = struct.unpack("<B", take(1))
                shapes.append(struct.unpack(f"<{ndim}I", take(4 * ndim)))
            arrays = []
            for shape in shapes:
                n = int(np.prod(shape)) if shape else 1
                arrays.append(np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape))
            layers.append(LayerParams(_KIND_NAMES[kind_code], arrays[0], arrays[1], stride))
        if pos != len(mv):
            raise ShapeError(f"parameter blob has {len(mv) - pos} trailing bytes")
        return cls(version=int(version), layers=layers)
