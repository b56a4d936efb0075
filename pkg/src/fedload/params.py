"""Named parameter collections and their binary wire format.

A :class:`ParamSet` is the unit that clients and the server exchange. Entries
are float64 arrays kept read-only, so a ParamSet can be handed between
threads without copying.

Binary layout (little-endian)::

    b"FLPS" | version u16 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | f64 values
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

MAGIC = b"FLPS"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when tensors or parameter sets do not line up."""


class FormatError(ValueError):
    """Raised when a serialized ParamSet cannot be decoded."""


def _frozen(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


class ParamSet(Mapping[str, np.ndarray]):
    """Immutable mapping of parameter name to float64 array.

    Iteration order is lexicographic by name; this is also the order used
    for serialization and for flattening to a vector.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, "np.typing.ArrayLike"] | None = None):
        entries = entries or {}
        self._entries = {name: _frozen(entries[name]) for name in sorted(entries)}

    @classmethod
    def _wrap(cls, entries: dict[str, np.ndarray]):
        # trusted constructor: arrays are fresh results of arithmetic
        obj = cls.__new__(cls)
        for arr in entries.values():
            arr.setflags(write=False)
        obj._entries = entries
        return obj

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({len(self)} entries, {self.num_params} values)"

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    # -- compatibility ---------------------------------------------------
    def compatible(self, other: Mapping[str, np.ndarray]) -> bool:
        if set(self._entries) != set(other):
            return False
        return all(np.shape(other[k]) == v.shape for k, v in self._entries.items())

    def check_compatible(self, other: Mapping[str, np.ndarray]) -> None:
        mine, theirs = set(self._entries), set(other)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise ShapeError(f"parameter names differ: missing={missing} extra={extra}")
        bad = [
            f"{k}: {v.shape} vs {np.shape(other[k])}"
            for k, v in self._entries.items()
            if np.shape(other[k]) != v.shape
        ]
        if bad:
            raise ShapeError("parameter shapes differ: " + "; ".join(bad))

    # -- arithmetic ------------------------------------------------------
    def _zip(self, other, fn):
        self.check_compatible(other)
        return type(self)._wrap({k: fn(v, other[k]) for k, v in self._entries.items()})

    def __add__(self, other: "ParamSet") -> "ParamSet":
        return self._zip(other, np.add)

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        return self._zip(other, np.subtract)

    def __mul__(self, scalar: float) -> "ParamSet":
        s = float(scalar)
        return type(self)._wrap({k: v * s for k, v in self._entries.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "ParamSet":
        return self * -1.0

    def axpy(self, alpha: float, other: "ParamSet") -> "ParamSet":
        """Return ``self + alpha * other``."""
        a = float(alpha)
        return self._zip(other, lambda x, y: x + a * y)

    def map(self, fn) -> "ParamSet":
        return type(self)._wrap({k: np.asarray(fn(v), dtype=np.float64) for k, v in self._entries.items()})

    def zeros_like(self) -> "ParamSet":
        return type(self)._wrap({k: np.zeros_like(v) for k, v in self._entries.items()})

    def sq_norm(self) -> float:
        return float(sum(np.sum(v * v) for v in self._entries.values()))

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._entries.values())

    def bit_equal(self, other: Mapping[str, np.ndarray]) -> bool:
        if not self.compatible(other):
            return False
        return all(
            np.array_equal(v.view(np.uint64), np.asarray(other[k], dtype=np.float64).view(np.uint64))
            for k, v in self._entries.items()
        )

    # -- flat views ------------------------------------------------------
    def to_vector(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def from_vector(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params:
            raise ShapeError(f"vector has {vec.size} values, expected {self.num_params}")
        out, pos = {}, 0
        for k, v in self._entries.items():
            out[k] = vec[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return type(self)._wrap(out)

    # -- serialization ---------------------------------------------------
    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(self._entries))]
        for name, arr in self._entries.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.astype("<f8", copy=False).tobytes(order="C"))
        return b"".join(parts)

    @property
    def nbytes(self) -> int:
        """Size of :meth:`to_bytes` output, computed without serializing."""
        n = 4 + 2 + 4
        for name, arr in self._entries.items():
            n += 2 + len(name.encode("utf-8")) + 1 + 4 * arr.ndim + 8 * arr.size
        return n

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        view = memoryview(blob)
        if bytes(view[:4]) != MAGIC:
            raise FormatError("bad magic, not a FLPS blob")
        try:
            version, count = struct.unpack_from("<HI", view, 4)
            if version != FORMAT_VERSION:
                raise FormatError(f"unsupported FLPS version {version}")
            pos = 10
            entries: dict[str, np.ndarray] = {}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", view, pos)
                pos += 2
                name = bytes(view[pos:pos + nlen]).decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<B", view, pos)
                pos += 1
                dims = struct.unpack_from(f"<{rank}I", view, pos)
                pos += 4 * rank
                size = int(np.prod(dims, dtype=np.int64))
                if pos + 8 * size > len(view):
                    raise FormatError(f"truncated values for entry {name!r}")
                arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos)
                entries[name] = arr.astype(np.float64).reshape(dims)
                pos += 8 * size
        except struct.error as exc:
            raise FormatError(f"truncated FLPS blob: {exc}") from None
        if pos != len(view):
            raise FormatError(f"{len(view) - pos} trailing bytes after last entry")
        return cls._wrap({k: entries[k] for k in sorted(entries)})

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParamSet":
        return cls.from_bytes(Path(path).read_bytes())


class GradSet(ParamSet):
    """Gradients, one array per parameter, shaped like the originating ParamSet."""

    __slots__ = ()


def weighted_sum(sets: Sequence[ParamSet], weights: Iterable[float]) -> ParamSet:
    """Return ``sum_i weights[i] * sets[i]``, accumulated left to right."""
    weights = [float(w) for w in weights]
    if not sets:
        raise ValueError("weighted_sum of no parameter sets")
    if len(weights) != len(sets):
        raise ValueError(f"{len(sets)} parameter sets but {len(weights)} weights")
    first = sets[0]
    for other in sets[1:]:
        first.check_compatible(other)
    out = {}
    for name in first:
        # seed with the first term so a single unit weight is an exact copy
        acc = weights[0] * first[name]
        for ps, w in zip(sets[1:], weights[1:]):
            acc += w * ps[name]
        out[name] = acc
    return ParamSet._wrap(out)


def mean(sets: Sequence[ParamSet]) -> ParamSet:
    """Uniform average, ``(1/K) * sum_i sets[i]``."""
    total = weighted_sum(sets, [1.0] * len(sets))
    return total * (1.0 / len(sets))
