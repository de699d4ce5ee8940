"""HNSW approximate nearest-neighbour index over cosine similarity.

The index stores L2-normalized float32 vectors and searches by
``distance = 1 - cosine``; results are reported as cosine similarities.
Neighbour selection keeps the closest candidates (no diversity pruning).
Build once, :meth:`HnswIndex.freeze`, then query or persist.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import _hnsw_kernels as kernels
from .embedding import (
    EMBEDDING_MAGIC,
    ScoredId,
    as_vector,
    normalize,
    normalize_rows,
    parse_embedding_bytes,
)
from .errors import (
    CorruptFileError,
    DimensionError,
    DuplicateIdError,
    EmptyIndexError,
    FormatError,
    IndexStateError,
)

INDEX_MAGIC = b"RHN1"
INDEX_VERSION = 1
MAX_ID = 2**64 - 1

_PREFIX = struct.Struct("<4sIIQ")  # magic, version, dim, count
_PARAMS = struct.Struct("<IIIdQ")  # max_degree, ef_construction, ef_search, level_lambda, rng_seed
_ENTRY = struct.Struct("<Qi")  # entry id, max level (-1 when empty)
_NODE = struct.Struct("<QI")  # id, level
_COUNT = struct.Struct("<I")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class HnswParams:
    max_degree: int = 16
    ef_construction: int = 200
    ef_search: int = 128
    level_lambda: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_degree < 2:
            raise ValueError("max_degree must be >= 2")
        if self.ef_construction < self.max_degree:
            raise ValueError("ef_construction must be >= max_degree")
        if self.ef_search < 1:
            raise ValueError("ef_search must be >= 1")
        if not 0 <= self.rng_seed <= MAX_ID:
            raise ValueError("rng_seed must fit in 64 unsigned bits")
        if self.level_lambda is None:
            object.__setattr__(self, "level_lambda", 1.0 / math.log(self.max_degree))
        elif not self.level_lambda > 0:
            raise ValueError("level_lambda must be positive")


class HnswIndex:
    """Layered proximity graph; see the module docstring for the algorithm."""

    def __init__(self, dim: int, params: HnswParams | None = None, capacity: int = 1024):
        if dim < 1:
            raise DimensionError("dim must be >= 1")
        self.dim = int(dim)
        self.params = params or HnswParams()
        self.frozen = False
        self._rng = np.random.default_rng(self.params.rng_seed)
        self._n = 0
        self._ids: list[int] = []
        self._pos: dict[int, int] = {}
        self._entry = -1
        self._max_level = -1
        self._tag = 1
        self._alloc(max(capacity, 1), max(capacity // 8, 1))

    def _alloc(self, cap: int, up_cap: int) -> None:
        m = self.params.max_degree
        self._vecs = np.zeros((cap, self.dim), dtype=np.float32)
        self._levels = np.zeros(cap, dtype=np.int64)
        self._adj0 = np.zeros((cap, 2 * m), dtype=np.int64)
        self._cnt0 = np.zeros(cap, dtype=np.int64)
        self._slot = np.full(cap, -1, dtype=np.int64)
        self._visited = np.zeros(cap, dtype=np.int32)
        self._up_adj = np.zeros((up_cap, kernels.MAX_LEVEL, m), dtype=np.int64)
        self._up_cnt = np.zeros((up_cap, kernels.MAX_LEVEL), dtype=np.int64)
        self._n_up = 0

    def _grow(self) -> None:
        cap = self._vecs.shape[0] * 2
        for name in ("_vecs", "_levels", "_adj0", "_cnt0", "_slot", "_visited"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
            if name == "_slot":
                new.fill(-1)
            new[: old.shape[0]] = old
            setattr(self, name, new)

    def _grow_upper(self) -> None:
        cap = self._up_adj.shape[0] * 2
        for name in ("_up_adj", "_up_cnt"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
            new[: old.shape[0]] = old
            setattr(self, name, new)

    def __len__(self) -> int:
        return self._n

    def __contains__(self, id_) -> bool:
        return id_ in self._pos

    @property
    def ids(self) -> list[int]:
        return list(self._ids)

    @property
    def vectors(self) -> np.ndarray:
        """Stored normalized vectors, in insertion order (read-only view)."""
        view = self._vecs[: self._n]
        view.flags.writeable = False
        return view

    @property
    def entry_point(self) -> int | None:
        return self._ids[self._entry] if self._entry >= 0 else None

    @property
    def max_level(self) -> int:
        return self._max_level

    def _draw_level(self) -> int:
        u = self._rng.random()
        level = int(math.floor(-math.log(1.0 - u) * self.params.level_lambda))
        return min(level, kernels.MAX_LEVEL)

    def insert(self, id_: int, vector) -> None:
        if self.frozen:
            raise IndexStateError("index is frozen")
        id_ = int(id_)
        if not 0 <= id_ <= MAX_ID:
            raise ValueError(f"id {id_} does not fit in 64 unsigned bits")
        if id_ in self._pos:
            raise DuplicateIdError(id_)
        v = normalize(as_vector(vector, self.dim))
        if self._n == self._vecs.shape[0]:
            self._grow()
        node = self._n
        level = self._draw_level()
        self._vecs[node] = v
        self._levels[node] = level
        if level > 0:
            if self._n_up == self._up_adj.shape[0]:
                self._grow_upper()
            self._slot[node] = self._n_up
            self._n_up += 1
        self._ids.append(id_)
        self._pos[id_] = node
        self._n += 1
        if self._entry < 0:
            self._entry, self._max_level = node, level
            return
        self._tag = kernels.insert_node(
            node, level, self._entry, self._max_level, self.params.max_degree,
            self.params.ef_construction, self._vecs, self._adj0, self._cnt0,
            self._slot, self._up_adj, self._up_cnt, self._visited, self._tag,
        )
        if self._tag > 2**30:
            self._visited.fill(0)
            self._tag = 1
        if level > self._max_level:
            self._entry, self._max_level = node, level

    def add(self, ids: Iterable[int], vectors) -> None:
        vectors = np.asarray(vectors)
        ids = list(ids)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise DimensionError("ids and vectors must have matching lengths")
        for id_, v in zip(ids, vectors):
            self.insert(id_, v)

    def freeze(self) -> "HnswIndex":
        self.frozen = True
        self._visited = np.zeros(0, dtype=np.int32)  # build scratch no longer needed
        return self

    def level_of(self, id_: int) -> int:
        return int(self._levels[self._pos[id_]])

    def neighbors(self, id_: int, level: int = 0) -> list[int]:
        node = self._pos[id_]
        if level > self._levels[node]:
            raise ValueError(f"node {id_} does not exist at level {level}")
        if level == 0:
            row = self._adj0[node, : self._cnt0[node]]
        else:
            s = self._slot[node]
            row = self._up_adj[s, level - 1, : self._up_cnt[s, level - 1]]
        return [self._ids[p] for p in row]

    def _rank(self, rows: np.ndarray, q: np.ndarray, k: int) -> list[ScoredId]:
        scores = kernels.dot_rows(self._vecs, rows, q)
        ids = np.asarray([self._ids[r] for r in rows], dtype=np.uint64)
        order = np.lexsort((ids, -scores))[:k]
        return [ScoredId(int(ids[i]), float(scores[i])) for i in order]

    def search(self, query, k: int, ef_search: int | None = None) -> list[ScoredId]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if self._n == 0:
            raise EmptyIndexError("search on an empty index")
        q = normalize(as_vector(query, self.dim))
        ef = max(ef_search or self.params.ef_search, k)
        rows = kernels.knn_candidates(
            q, self._entry, self._max_level, ef, self._vecs, self._adj0, self._cnt0,
            self._slot, self._up_adj, self._up_cnt, self._n,
        )
        return self._rank(rows, q, k)

    def exact_search(self, query, k: int) -> list[ScoredId]:
        """Linear scan over the stored vectors, same arithmetic as :meth:`search`."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if self._n == 0:
            raise EmptyIndexError("search on an empty index")
        q = normalize(as_vector(query, self.dim))
        return self._rank(np.arange(self._n, dtype=np.int64), q, k)

    def to_bytes(self) -> bytes:
        if not self.frozen:
            raise IndexStateError("index must be frozen before saving")
        p = self.params
        parts = [
            _PREFIX.pack(INDEX_MAGIC, INDEX_VERSION, self.dim, self._n),
            _PARAMS.pack(p.max_degree, p.ef_construction, p.ef_search, p.level_lambda, p.rng_seed),
            _ENTRY.pack(self._ids[self._entry] if self._entry >= 0 else 0, self._max_level),
        ]
        ids = np.asarray(self._ids, dtype="<u8")
        for node in range(self._n):
            level = int(self._levels[node])
            parts.append(_NODE.pack(self._ids[node], level))
            for lv in range(level + 1):
                if lv == 0:
                    row = self._adj0[node, : self._cnt0[node]]
                else:
                    s = self._slot[node]
                    row = self._up_adj[s, lv - 1, : self._up_cnt[s, lv - 1]]
                parts.append(_COUNT.pack(len(row)))
                parts.append(ids[row].tobytes())
        parts.append(struct.pack("<4sIQ", EMBEDDING_MAGIC, self.dim, self._n))
        parts.append(np.ascontiguousarray(self._vecs[: self._n], dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + _CRC.pack(zlib.crc32(body))

    def save(self, path: str | os.PathLike) -> None:
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HnswIndex":
        if len(data) < 4:
            raise CorruptFileError("index file too short")
        if data[:4] != INDEX_MAGIC:
            raise FormatError(f"bad index magic {data[:4]!r}")
        fixed = _PREFIX.size + _PARAMS.size + _ENTRY.size + _CRC.size
        if len(data) < fixed:
            raise CorruptFileError("index file truncated")
        body, (crc,) = data[:-4], _CRC.unpack_from(data, len(data) - 4)
        if zlib.crc32(body) != crc:
            raise CorruptFileError("index checksum mismatch")
        _, version, dim, count = _PREFIX.unpack_from(body, 0)
        if version != INDEX_VERSION:
            raise FormatError(f"unsupported index version {version}")
        try:
            return cls._decode(body, dim, count)
        except (struct.error, KeyError, IndexError, ValueError) as exc:
            raise CorruptFileError(f"index payload malformed: {exc}") from exc

    @classmethod
    def _decode(cls, body: bytes, dim: int, count: int) -> "HnswIndex":
        off = _PREFIX.size
        max_degree, ef_c, ef_s, lam, seed = _PARAMS.unpack_from(body, off)
        off += _PARAMS.size
        entry_id, max_level = _ENTRY.unpack_from(body, off)
        off += _ENTRY.size
        params = HnswParams(max_degree, ef_c, ef_s, lam, seed)
        index = cls(dim, params, capacity=max(count, 1))
        n_up = 0
        adjacency = []
        for node in range(count):
            id_, level = _NODE.unpack_from(body, off)
            off += _NODE.size
            if level > kernels.MAX_LEVEL or id_ in index._pos:
                raise ValueError(f"bad node record for id {id_}")
            rows = []
            for lv in range(level + 1):
                (n,) = _COUNT.unpack_from(body, off)
                off += _COUNT.size
                limit = 2 * max_degree if lv == 0 else max_degree
                if n > limit or off + 8 * n > len(body):
                    raise ValueError(f"bad adjacency count {n} for id {id_}")
                rows.append(np.frombuffer(body, dtype="<u8", count=n, offset=off))
                off += 8 * n
            adjacency.append(rows)
            index._ids.append(id_)
            index._pos[id_] = node
            index._levels[node] = level
            if level > 0:
                if n_up == index._up_adj.shape[0]:
                    index._n_up = n_up
                    index._grow_upper()
                index._slot[node] = n_up
                n_up += 1
        index._n_up = n_up
        for node, rows in enumerate(adjacency):
            for lv, row in enumerate(rows):
                positions = [index._pos[int(x)] for x in row]
                if lv == 0:
                    index._adj0[node, : len(positions)] = positions
                    index._cnt0[node] = len(positions)
                else:
                    s = index._slot[node]
                    index._up_adj[s, lv - 1, : len(positions)] = positions
                    index._up_cnt[s, lv - 1] = len(positions)
        vdim, vectors, used = parse_embedding_bytes(memoryview(body)[off:], strict_size=True)
        if vdim != dim or vectors.shape[0] != count:
            raise ValueError("vector payload does not match header")
        index._vecs[:count] = vectors
        index._n = count
        if count:
            index._entry = index._pos[entry_id]
            index._max_level = max_level
        return index.freeze()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "HnswIndex":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_index(ids: Iterable[int], vectors, params: HnswParams | None = None) -> HnswIndex:
    vectors = np.asarray(vectors)
    index = HnswIndex(vectors.shape[1], params, capacity=max(vectors.shape[0], 1))
    index.add(ids, vectors)
    return index.freeze()


def exact_search(vectors, query, k: int, ids=None, normalized: bool = False) -> list[ScoredId]:
    """Brute-force cosine top-k over ``vectors``; the ground truth for recall tests.

    Pass ``normalized=True`` when ``vectors`` are already unit rows (e.g.
    :attr:`HnswIndex.vectors`) so scores match the index bit for bit.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    mat = np.asarray(vectors, dtype=np.float32)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise EmptyIndexError("exact search over an empty vector set")
    if not normalized:
        mat = normalize_rows(mat)
    q = normalize(as_vector(query, mat.shape[1]))
    mat = np.ascontiguousarray(mat)
    scores = kernels.dot_rows(mat, np.arange(mat.shape[0], dtype=np.int64), q)
    id_arr = np.arange(mat.shape[0], dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
    order = np.lexsort((id_arr, -scores))[:k]
    return [ScoredId(int(id_arr[i]), float(scores[i])) for i in order]
