"""Two-stage retrieval: image-anchored entity lookup, then query-expanded text search.

Stage 1 searches the vector index with the query image embedding and joins
each hit to its :class:`~vlrag.store.EntityRecord`. Stage 2 expands the text
query with each entity's name and description, asks a text backend for the
top-``l`` passages, and truncates them. The result is one
:class:`KnowledgeSnippet` per stage-1 hit, in stage-1 order.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .backends import ScoredPassage, TextRetrieverBackend
from .embedding import as_vector
from .errors import AlignmentError, BackendError, DimensionError
from .index import HnswIndex
from .store import EntityRecord, EntityStore
from .text import collapse_ws, count_tokens, truncate_tokens

logger = logging.getLogger(__name__)

DEFAULT_TRUNCATION = 400
DEFAULT_EXPANSION_LIMIT = 512
_TERMINAL = (".", "!", "?")


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 3
    l: int = 3
    truncation_limit: int = DEFAULT_TRUNCATION
    expansion_limit: int = DEFAULT_EXPANSION_LIMIT
    max_in_flight: int = 4

    def __post_init__(self):
        for name in ("k", "l", "truncation_limit", "expansion_limit", "max_in_flight"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class MultimodalQuery:
    """A text question plus the embeddings of its image.

    ``patch_embeddings`` and ``text_embedding`` are only needed for visual
    token refinement; retrieval uses ``image_embedding`` and ``text``.
    """

    text: str
    image_embedding: np.ndarray
    patch_embeddings: np.ndarray | None = None
    text_embedding: np.ndarray | None = None
    image_ref: str = ""

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("query text must be non-empty")
        self.image_embedding = as_vector(self.image_embedding)
        dim = self.image_embedding.shape[0]
        if self.text_embedding is not None:
            self.text_embedding = as_vector(self.text_embedding, dim)
        if self.patch_embeddings is not None:
            patches = np.asarray(self.patch_embeddings, dtype=np.float32)
            if patches.ndim != 2 or patches.shape[0] < 1 or patches.shape[1] != dim:
                raise DimensionError(f"patch embeddings must be (n>=1, {dim}), got {patches.shape}")
            self.patch_embeddings = patches


@dataclass(frozen=True)
class KnowledgeSnippet:
    entity: EntityRecord
    passages: tuple[str, ...]
    stage1_score: float | None  # None for snippets not produced by stage 1
    backend_error: str | None = None

    def to_dict(self) -> dict:
        out = self.entity.to_dict()
        out["stage1_score"] = self.stage1_score
        out["passages"] = list(self.passages)
        out["backend_error"] = self.backend_error
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "KnowledgeSnippet":
        entity = EntityRecord.from_dict(
            {k: v for k, v in obj.items() if k not in ("stage1_score", "passages", "backend_error")}
        )
        passages = obj["passages"]
        if not isinstance(passages, list) or not all(isinstance(p, str) for p in passages):
            raise ValueError("passages must be a list of strings")
        score = obj["stage1_score"]
        error = obj.get("backend_error")
        if error is not None and not isinstance(error, str):
            raise ValueError("backend_error must be a string or null")
        return cls(entity, tuple(passages), None if score is None else float(score), error)


def check_alignment(index: HnswIndex, store: EntityStore) -> None:
    index_ids, store_ids = set(index.ids), set(store.ids)
    if index_ids != store_ids:
        missing = len(index_ids - store_ids)
        extra = len(store_ids - index_ids)
        raise AlignmentError(
            f"index/store id sets differ: {missing} ids only in index, {extra} only in store"
        )


def stage1_retrieve(
    index: HnswIndex, store: EntityStore, query: MultimodalQuery, k: int
) -> list[tuple[EntityRecord, float]]:
    return [(store.get(hit.id), hit.score) for hit in index.search(query.image_embedding, k)]


def _terminate(text: str) -> str:
    return text if text.endswith(_TERMINAL) else text + "."


def expand_query(q: str, entity: EntityRecord, max_tokens: int = DEFAULT_EXPANSION_LIMIT) -> str:
    """Prefix ``q`` with the entity name and description: ``"{name}. {description}. {q}"``.

    ``q`` is kept verbatim at the end. When the result would exceed
    ``max_tokens`` whitespace tokens, the description is cut from the right
    (then the name, if ``q`` alone nearly fills the budget).
    """
    if not q or not q.strip():
        raise ValueError("query text must be non-empty")
    name = collapse_ws(entity.entity_name).split()
    desc = collapse_ws(entity.description).split()
    budget = max_tokens - count_tokens(q)
    if len(name) + len(desc) > budget:
        desc = desc[: max(budget - len(name), 0)]
        name = name[: max(budget, 0)]
    parts = []
    if name:
        parts.append(_terminate(" ".join(name)))
    if desc:
        parts.append(_terminate(" ".join(desc)))
    parts.append(q)
    return " ".join(parts)


def entity_context(entity: EntityRecord, max_tokens: int = DEFAULT_EXPANSION_LIMIT) -> str:
    """Search text for an entity on its own (no user question)."""
    name = collapse_ws(entity.entity_name)
    desc = collapse_ws(entity.description)
    text = f"{_terminate(name)} {_terminate(desc)}" if desc else _terminate(name)
    return truncate_tokens(text, max_tokens)


def stage2_retrieve(backend: TextRetrieverBackend, expanded_query: str, l: int) -> list[ScoredPassage]:
    if l < 1:
        raise ValueError("l must be >= 1")
    try:
        return list(backend.search(expanded_query, l))[:l]
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"text backend failed: {exc}") from exc


def truncate_passage(text: str, limit_tokens: int = DEFAULT_TRUNCATION) -> str:
    return truncate_tokens(text, limit_tokens)


def fetch_passages(
    backend: TextRetrieverBackend, search_text: str, config: RetrievalConfig
) -> tuple[tuple[str, ...], str | None]:
    """Stage 2 for one entity; backend failures degrade to no passages."""
    try:
        hits = stage2_retrieve(backend, search_text, config.l)
    except BackendError as exc:
        logger.warning("stage-2 retrieval failed, continuing without passages: %s", exc)
        return (), str(exc)
    return tuple(truncate_passage(h.text, config.truncation_limit) for h in hits), None


def retrieve(
    index: HnswIndex,
    store: EntityStore,
    backend: TextRetrieverBackend,
    query: MultimodalQuery,
    config: RetrievalConfig | None = None,
) -> list[KnowledgeSnippet]:
    config = config or RetrievalConfig()
    hits = stage1_retrieve(index, store, query, config.k)

    def one(hit):
        entity, score = hit
        passages, error = fetch_passages(backend, expand_query(query.text, entity, config.expansion_limit), config)
        return KnowledgeSnippet(entity, passages, score, error)

    if config.max_in_flight > 1 and len(hits) > 1:
        with ThreadPoolExecutor(max_workers=min(config.max_in_flight, len(hits))) as pool:
            return list(pool.map(one, hits))
    return [one(h) for h in hits]


@dataclass
class RetrievalPipeline:
    """An index, store and backend bound together after an alignment check."""

    index: HnswIndex
    store: EntityStore
    backend: TextRetrieverBackend
    config: RetrievalConfig = field(default_factory=RetrievalConfig)

    def __post_init__(self):
        check_alignment(self.index, self.store)

    def retrieve(self, query: MultimodalQuery, k: int | None = None) -> list[KnowledgeSnippet]:
        config = self.config
        if k is not None and k != config.k:
            config = RetrievalConfig(k, config.l, config.truncation_limit,
                                     config.expansion_limit, config.max_in_flight)
        return retrieve(self.index, self.store, self.backend, query, config)


def write_snippets(snippets: Iterable[KnowledgeSnippet], out: IO[str]) -> int:
    n = 0
    for snip in snippets:
        out.write(json.dumps(snip.to_dict(), ensure_ascii=False))
        out.write("\n")
        n += 1
    return n
