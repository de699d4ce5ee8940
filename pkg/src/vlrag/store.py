"""Entity records keyed by vector id, with JSON-lines persistence."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import DuplicateIdError, ExhaustedStoreError, NotFoundError, ParseError
from .text import normalize_name

_FIELDS = ("id", "entity_name", "description", "image_ref", "patch_embedding_ref")


@dataclass(frozen=True)
class EntityRecord:
    id: int
    entity_name: str
    description: str = ""
    image_ref: str = ""
    patch_embedding_ref: str | None = None

    def __post_init__(self):
        if not self.entity_name or not self.entity_name.strip():
            raise ValueError("entity_name must be non-empty")
        if not 0 <= self.id < 2**64:
            raise ValueError(f"id {self.id} does not fit in 64 unsigned bits")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "EntityRecord":
        if not isinstance(obj, dict):
            raise ValueError("record must be an object")
        unknown = set(obj) - set(_FIELDS)
        if unknown:
            raise ValueError(f"unknown fields {sorted(unknown)}")
        for key in ("id", "entity_name"):
            if key not in obj:
                raise ValueError(f"missing field {key!r}")
        if not isinstance(obj["id"], int) or isinstance(obj["id"], bool):
            raise ValueError("id must be an integer")
        for key in ("entity_name", "description", "image_ref"):
            if key in obj and not isinstance(obj[key], str):
                raise ValueError(f"{key} must be a string")
        ref = obj.get("patch_embedding_ref")
        if ref is not None and not isinstance(ref, str):
            raise ValueError("patch_embedding_ref must be a string or null")
        return cls(
            id=obj["id"],
            entity_name=obj["entity_name"],
            description=obj.get("description", ""),
            image_ref=obj.get("image_ref", ""),
            patch_embedding_ref=ref,
        )


class EntityStore:
    """Immutable-after-load mapping from id to :class:`EntityRecord`."""

    def __init__(self, records: Iterable[EntityRecord] = ()):
        self._records: dict[int, EntityRecord] = {}
        for rec in records:
            if rec.id in self._records:
                raise DuplicateIdError(rec.id)
            self._records[rec.id] = rec
        self._eligible_cache: dict[str, list[EntityRecord]] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[EntityRecord]:
        return iter(self._records.values())

    def __contains__(self, id_) -> bool:
        return id_ in self._records

    def __eq__(self, other) -> bool:
        return isinstance(other, EntityStore) and list(self) == list(other)

    @property
    def ids(self) -> list[int]:
        return list(self._records)

    def get(self, id_: int) -> EntityRecord:
        try:
            return self._records[id_]
        except KeyError:
            raise NotFoundError(id_) from None

    def _eligible(self, excluded_entity_name: str) -> list[EntityRecord]:
        key = normalize_name(excluded_entity_name)
        cached = self._eligible_cache.get(key)
        if cached is None:
            cached = sorted(
                (r for r in self._records.values() if normalize_name(r.entity_name) != key),
                key=lambda r: r.id,
            )
            self._eligible_cache[key] = cached
        return cached

    def sample_mismatched(self, excluded_entity_name: str, seed) -> EntityRecord:
        """Draw uniformly from records whose name differs from ``excluded_entity_name``.

        Names are compared case-insensitively with whitespace collapsed. The
        draw is a pure function of ``seed`` (an int or ``numpy.random.SeedSequence``).
        """
        eligible = self._eligible(excluded_entity_name)
        if not eligible:
            raise ExhaustedStoreError(f"no entity other than {excluded_entity_name!r} in store")
        rng = np.random.default_rng(seed)
        return eligible[int(rng.integers(len(eligible)))]

    def save(self, path: str | os.PathLike) -> None:
        save_store(self, path)


def sample_mismatched(store: EntityStore, excluded_entity_name: str, seed) -> EntityRecord:
    return store.sample_mismatched(excluded_entity_name, seed)


def dump_record(record: EntityRecord) -> str:
    return json.dumps(record.to_dict(), ensure_ascii=False)


def save_store(store: EntityStore, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in store:
            fh.write(dump_record(rec))
            fh.write("\n")


def parse_records(lines: Iterable[str]) -> Iterator[EntityRecord]:
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            yield EntityRecord.from_dict(json.loads(line))
        except (json.JSONDecodeError, ValueError) as exc:
            raise ParseError(str(exc), line=lineno) from exc


def load_store(path: str | os.PathLike) -> EntityStore:
    with open(path, encoding="utf-8") as fh:
        return EntityStore(parse_records(fh))
