"""Vector primitives, scoring, top-k selection and the RVE1 embedding file.

Embeddings travel as float32 numpy arrays; similarity arithmetic accumulates
in float64. Every ranked list in the package is ordered by score descending,
then id ascending.
"""

from __future__ import annotations

import heapq
import os
import struct
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    CorruptFileError,
    DegenerateVectorError,
    DimensionError,
    EmptyInputError,
    FormatError,
)

EMBEDDING_MAGIC = b"RVE1"
_HEADER = struct.Struct("<4sIQ")  # magic, dim, count
HEADER_SIZE = _HEADER.size  # 16


class ScoredId(NamedTuple):
    id: int
    score: float


def as_vector(values, dim: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float32 array, optionally checking ``dim``."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 1 or v.shape[0] < 1:
        raise DimensionError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionError(f"expected dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise DegenerateVectorError("vector has non-finite components")
    return v


def normalize(values) -> np.ndarray:
    """Return the L2-normalized float32 copy of a vector."""
    v = as_vector(values).astype(np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateVectorError("cannot normalize a zero vector")
    return (v / norm).astype(np.float32)


def normalize_rows(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DegenerateVectorError("matrix has non-finite components")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("cannot normalize a zero row")
    return (m / norms).astype(np.float32)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def softmax_scores(sims: Sequence[float]) -> np.ndarray:
    """Normalize similarity scores into a probability distribution.

    Shifts by the maximum before exponentiating, so the result is invariant
    to adding a constant to every input and never overflows.
    """
    s = np.asarray(sims, dtype=np.float64)
    if s.size == 0:
        raise EmptyInputError("softmax over an empty candidate set")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax inputs must be finite")
    e = np.exp(s - s.max())
    return e / e.sum()


def rank_key(item: ScoredId):
    return (-item.score, item.id)


def top_k(candidates: Iterable[ScoredId], k: int) -> list[ScoredId]:
    """Exact top-k by score descending, ties broken by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return heapq.nsmallest(k, (ScoredId(int(c[0]), float(c[1])) for c in candidates), key=rank_key)


def write_embedding_file(path: str | os.PathLike, vectors) -> None:
    arr = np.asarray(vectors, dtype="<f4")
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise DimensionError(f"expected a (count, dim) array, got shape {arr.shape}")
    count, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, dim, count))
        fh.write(np.ascontiguousarray(arr).tobytes())


def parse_embedding_bytes(buf: bytes | memoryview, strict_size: bool = True):
    """Decode an RVE1 blob; returns ``(dim, array, bytes_consumed)``."""
    if len(buf) < HEADER_SIZE:
        raise CorruptFileError(f"embedding payload too short for header ({len(buf)} bytes)")
    magic, dim, count = _HEADER.unpack_from(buf, 0)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"bad embedding magic {magic!r}")
    if dim < 1:
        raise CorruptFileError("embedding dim must be >= 1")
    size = HEADER_SIZE + count * dim * 4
    if len(buf) < size or (strict_size and len(buf) != size):
        raise CorruptFileError(
            f"embedding payload is {len(buf)} bytes, header predicts {size}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=HEADER_SIZE)
    return dim, data.reshape(count, dim).astype(np.float32), size


def read_embedding_file(path: str | os.PathLike) -> tuple[int, np.ndarray]:
    """Read an RVE1 file into ``(dim, array of shape (count, dim))``."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        if len(head) < HEADER_SIZE:
            raise CorruptFileError(f"{path}: file too short for header")
        magic, dim, count = _HEADER.unpack(head)
        if magic != EMBEDDING_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if dim < 1:
            raise CorruptFileError(f"{path}: dim must be >= 1")
        expected = HEADER_SIZE + count * dim * 4
        actual = os.fstat(fh.fileno()).st_size
        if actual != expected:
            raise CorruptFileError(f"{path}: {actual} bytes on disk, header predicts {expected}")
        data = np.fromfile(fh, dtype="<f4", count=count * dim)
    return dim, data.reshape(count, dim).astype(np.float32, copy=False)
