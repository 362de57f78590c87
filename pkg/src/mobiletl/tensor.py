"""Dense tensors, bit-packed masks, and a byte-accounted reverse-mode tape."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

_next_id = itertools.count(1)


class DType(Enum):
    F32 = "f32"
    F64 = "f64"
    I8 = "i8"
    BIT1 = "bit1"
    BIT2 = "bit2"


BIT_WIDTH = {
    DType.F32: 32,
    DType.F64: 64,
    DType.I8: 8,
    DType.BIT1: 1,
    DType.BIT2: 2,
}

_NP_DTYPE = {DType.F32: np.float32, DType.F64: np.float64, DType.I8: np.int8}


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Tensor:
    """Contiguous row-major n-d array.

    Float/int8 tensors hold an ndarray of the matching numpy dtype in
    ``data``.  bit1/bit2 tensors hold a packed 1-D uint8 buffer, padded to
    whole bytes per tensor.
    """

    __slots__ = ("shape", "dtype", "data", "id")

    def __init__(self, shape, dtype: DType, data: np.ndarray):
        shape = tuple(int(d) for d in shape)
        if len(shape) == 0:
            raise ShapeError("shape must be non-empty")
        for d in shape:
            if d < 1:
                raise ShapeError(f"dimension sizes must be >= 1, got {shape}")
        self.shape = shape
        self.dtype = dtype
        self.data = data
        self.id = next(_next_id)

    @property
    def elements(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return (self.elements * BIT_WIDTH[self.dtype] + 7) // 8

    def astype(self, dtype: DType) -> "Tensor":
        if dtype in (DType.BIT1, DType.BIT2) or self.dtype in (DType.BIT1, DType.BIT2):
            raise ShapeError("astype does not convert packed mask tensors")
        return Tensor(self.shape, dtype, self.data.astype(_NP_DTYPE[dtype]))

    def unpack(self) -> np.ndarray:
        """Unpack a bit1/bit2 tensor into a uint8 ndarray of self.shape."""
        if self.dtype == DType.BIT1:
            flat = np.unpackbits(self.data)[: self.elements]
        elif self.dtype == DType.BIT2:
            bits = np.unpackbits(self.data)[: self.elements * 2]
            flat = (bits[0::2] << 1) | bits[1::2]
        else:
            raise ShapeError("unpack only applies to bit1/bit2 tensors")
        return flat.reshape(self.shape)


def wrap(array: np.ndarray) -> Tensor:
    """Wrap an existing float/int8 ndarray without copying."""
    kind = {np.dtype(np.float32): DType.F32, np.dtype(np.float64): DType.F64,
            np.dtype(np.int8): DType.I8}[array.dtype]
    return Tensor(array.shape, kind, np.ascontiguousarray(array))


def pack_mask1(flags: np.ndarray, shape) -> Tensor:
    """Pack a boolean array into a 1-bit-per-element mask tensor."""
    packed = np.packbits(flags.astype(np.uint8).ravel())
    return Tensor(shape, DType.BIT1, packed)


def pack_mask2(codes: np.ndarray, shape) -> Tensor:
    """Pack an array of codes in {0,1,2,3} into a 2-bit-per-element mask."""
    flat = codes.astype(np.uint8).ravel()
    bits = np.empty(flat.size * 2, dtype=np.uint8)
    bits[0::2] = (flat >> 1) & 1
    bits[1::2] = flat & 1
    return Tensor(shape, DType.BIT2, np.packbits(bits))


def tensor_full(shape, dtype: DType, fill_value) -> Tensor:
    """Tensor of the given shape with every element equal to fill_value."""
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("shape must be non-empty")
    for d in shape:
        if d < 1:
            raise ShapeError(f"dimension sizes must be >= 1, got {shape}")
    n = math.prod(shape)
    if dtype in (DType.BIT1, DType.BIT2):
        limit = 1 if dtype == DType.BIT1 else 3
        fill = int(fill_value)
        if not 0 <= fill <= limit:
            raise ValueError(f"fill {fill_value} outside {dtype.value} range")
        flat = np.full(n, fill, dtype=np.uint8).reshape(shape)
        return pack_mask1(flat, shape) if dtype == DType.BIT1 else pack_mask2(flat, shape)
    if dtype == DType.I8:
        fill = int(fill_value)
        if not -128 <= fill <= 127:
            raise ValueError(f"fill {fill_value} outside i8 range")
        return Tensor(shape, dtype, np.full(shape, fill, dtype=np.int8))
    return Tensor(shape, dtype, np.full(shape, fill_value, dtype=_NP_DTYPE[dtype]))


def tensor_rand_normal(shape, seed: int, mean: float = 0.0, std: float = 1.0,
                       dtype: DType = DType.F32) -> Tensor:
    """Deterministic gaussian tensor: identical (shape, seed) gives identical bits."""
    if std < 0:
        raise ValueError("std must be >= 0")
    rng = np.random.default_rng(seed)
    data = rng.normal(mean, std, size=tuple(shape)).astype(_NP_DTYPE[dtype])
    return Tensor(shape, dtype, data)


class SavedKind(Enum):
    FullMap = "FullMap"
    Mask1 = "Mask1"
    Mask2 = "Mask2"
    SmallVector = "SmallVector"
    NormStats = "NormStats"


# bits per element for byte accounting, FullMap width depends on float dtype
_KIND_BITS = {SavedKind.Mask1: 1, SavedKind.Mask2: 2,
              SavedKind.SmallVector: 32, SavedKind.NormStats: 32}


def saved_bytes(kind: SavedKind, elements: int, dtype: DType = DType.F32) -> int:
    if kind == SavedKind.FullMap:
        bits = 64 if dtype == DType.F64 else 32
    else:
        bits = _KIND_BITS[kind]
    return (elements * bits + 7) // 8


@dataclass
class SavedBuffer:
    tensor_id: int
    kind: SavedKind
    bytes: int
    layer_id: str = ""


@dataclass
class TapeNode:
    op: str
    layer_id: str
    backward: object  # callable(grad_out) -> grad_in


@dataclass
class Tape:
    """Forward-ordered op records plus the saved-for-backward registry."""

    nodes: list = field(default_factory=list)
    saved: list = field(default_factory=list)
    _seen_ids: set = field(default_factory=set)
    _done: bool = False

    def record(self, op: str, layer_id: str, backward) -> None:
        self.nodes.append(TapeNode(op, layer_id, backward))

    def save(self, tensor: Tensor, kind: SavedKind, layer_id: str = "") -> None:
        if tensor.id in self._seen_ids:
            return  # dedup: one charge per distinct tensor
        self._seen_ids.add(tensor.id)
        self.saved.append(SavedBuffer(tensor.id, kind, tensor.nbytes, layer_id))

    def saved_bytes(self) -> int:
        return sum(b.bytes for b in self.saved)

    def saved_bytes_by_layer(self) -> dict:
        out: dict = {}
        for b in self.saved:
            out[b.layer_id] = out.get(b.layer_id, 0) + b.bytes
        return out

    def backward(self, loss: Tensor) -> dict:
        """Run reverse-mode on a scalar loss; returns {param id: grad ndarray}."""
        if self._done:
            raise StateError("backward already ran on this tape")
        if loss.elements != 1:
            raise ShapeError("loss must be scalar")
        self._done = True
        grads: dict = {}
        grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            grad = node.backward(grad, grads)
        self.saved.clear()
        self._seen_ids.clear()
        return grads


def tape_backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


def tape_saved_bytes(tape: Tape) -> int:
    return tape.saved_bytes()
