"""Ordered named parameter tensors and their ``FPS1`` binary encoding.

Layout (little-endian)::

    b"FPS1" | u32 count | count * entry
    entry = u16 name_len | name (utf-8) | u8 dtype (0=f32, 1=f64) | u8 ndim | u32 dims[ndim] | values
"""

from __future__ import annotations

import struct
from typing import Iterable, Iterator

import numpy as np

MAGIC = b"FPS1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ParamSetError(ValueError):
    pass


class ParamSet:
    """Immutable-by-convention ordered list of ``(name, ndarray)`` pairs."""

    __slots__ = ("_names", "_arrays")

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] = ()):
        names: list[str] = []
        arrays: list[np.ndarray] = []
        for name, arr in entries:
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise ParamSetError(f"{name}: unsupported dtype {arr.dtype}")
            names.append(name)
            arrays.append(arr)
        if len(set(names)) != len(names):
            raise ParamSetError("parameter names must be unique")
        self._names = tuple(names)
        self._arrays = tuple(arrays)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return self._arrays

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self._names, self._arrays))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __repr__(self) -> str:
        body = ", ".join(f"{n}{list(a.shape)}" for n, a in self)
        return f"ParamSet({body})"

    def __eq__(self, other: object) -> bool:
        # Bitwise equality: names, dtypes, shapes and raw bytes.
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    __hash__ = None  # type: ignore[assignment]

    def compatible(self, other: "ParamSet") -> bool:
        return self._names == other._names and all(
            a.shape == b.shape for a, b in zip(self._arrays, other._arrays)
        )

    def check_compatible(self, other: "ParamSet") -> None:
        if not self.compatible(other):
            raise ParamSetError(f"incompatible parameter sets: {self!r} vs {other!r}")

    def num_values(self) -> int:
        return sum(a.size for a in self._arrays)

    def map(self, fn) -> "ParamSet":
        return ParamSet((n, fn(a)) for n, a in self)

    def copy(self) -> "ParamSet":
        return self.map(np.array)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays]) if self._arrays else np.zeros(0)

    def to_bytes(self) -> bytes:
        return encode_paramset(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamSet":
        ps, end = decode_paramset(data)
        if end != len(data):
            raise ParamSetError(f"{len(data) - end} trailing bytes after FPS1 payload")
        return ps


def encode_paramset(ps: ParamSet) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(ps))]
    for name, arr in ps:
        raw = name.encode("utf-8")
        code = _DTYPE_CODES[arr.dtype]
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_paramset(data: bytes, offset: int = 0) -> tuple[ParamSet, int]:
    """Decode one FPS1 block starting at ``offset``; returns the set and the end offset."""
    view = memoryview(data)

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise ParamSetError("truncated FPS1 payload")
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ParamSetError("bad FPS1 magic")
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParamSetError("parameter name is not valid utf-8") from exc
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise ParamSetError(f"unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(dims)
        entries.append((name, arr.astype(dtype.newbyteorder("="))))
    return ParamSet(entries), offset
