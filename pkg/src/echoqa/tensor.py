"""Dense arrays, seeded random streams and the binary tensor format.

Tensors are plain C-contiguous (row-major) numpy arrays; the helpers here add
the validation the rest of the package relies on.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ShapeError(f"every dimension must be >= 1, got {shape}")
    return shape


class SeededRng:
    """Reproducible random stream.

    Backed by numpy's Philox4x32-10 counter-based generator keyed through a
    ``SeedSequence``.  The draw sequence depends only on ``seed`` (and the
    spawn path), never on OS entropy or platform.

    Split rule: ``child(k)`` returns an independent stream keyed by
    ``SeedSequence(seed, spawn_key=path + (k,))``; it does not advance the
    parent, so children can be derived in any order.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, k: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + (int(k),))

    def normal(self, size=None, mean=0.0, stddev=1.0):
        return self.gen.normal(mean, stddev, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path})"


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype)


def randn(shape: Sequence[int], rng: SeededRng, mean: float = 0.0,
          stddev: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
    if stddev < 0:
        raise ValueError(f"stddev must be non-negative, got {stddev}")
    shape = _check_shape(shape)
    # always draw in float64 so float32/float64 tensors share the same stream
    draws = rng.normal(shape)
    return (mean + stddev * draws).astype(dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def _binary(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape and a.ndim and b.ndim:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = _binary(a, b)
    return a + b


def sub(a, b):
    a, b = _binary(a, b)
    return a - b


def mul(a, b):
    a, b = _binary(a, b)
    return a * b


def scale(a, k: float):
    a = np.asarray(a)
    return a * a.dtype.type(k) if a.dtype.kind == "f" else a * k


def elementwise(op: str, a, b):
    try:
        fn = {"add": add, "sub": sub, "mul": mul, "scale": scale}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# Binary layout: u32 rank, rank x u32 dims, then raw little-endian scalars.

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def write_tensor(f: BinaryIO, t: np.ndarray) -> None:
    t = np.asarray(t)
    if t.dtype.name not in _DTYPES:
        raise TypeError(f"unsupported dtype {t.dtype}")
    _check_shape(t.shape)
    f.write(struct.pack("<I", t.ndim))
    f.write(struct.pack(f"<{t.ndim}I", *t.shape))
    f.write(np.ascontiguousarray(t, dtype=_DTYPES[t.dtype.name]).tobytes())


def read_tensor(f: BinaryIO, dtype="float32") -> np.ndarray:
    head = f.read(4)
    if len(head) != 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
    dt = _DTYPES[np.dtype(dtype).name]
    count = int(np.prod(dims))
    raw = f.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise EOFError("truncated tensor data")
    return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(dims)


def save_tensor(path, t: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path, dtype="float32") -> np.ndarray:
    with open(Path(path), "rb") as f:
        return read_tensor(f, dtype)
