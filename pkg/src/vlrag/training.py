"""Noise-injected training instances for retrieval-augmented VLM fine-tuning.

An instance interleaves the top-(k-1) retrieved snippets, one snippet about a
randomly drawn entity that does not match the gold entity, the query image
and the query text. Images are carried by reference.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import ParseError, VlragError
from .pipeline import (
    KnowledgeSnippet,
    MultimodalQuery,
    RetrievalPipeline,
    entity_context,
    fetch_passages,
)
from .text import count_tokens, normalize_name

logger = logging.getLogger(__name__)

NOISE = "noise"
QUERY_IMAGE = "query_image"
QUERY_TEXT = "query_text"
IMAGE_TOKEN = "<image>"


def retrieved_segment(i: int) -> str:
    return f"retrieved:{i}"


def default_layout(n_retrieved: int, noise_slot: int | None = None) -> tuple[str, ...]:
    """``[r1 .. r_n, noise, I, q]``; ``noise_slot`` moves the noise among the snippets."""
    segs = [retrieved_segment(i) for i in range(1, n_retrieved + 1)]
    segs.insert(n_retrieved if noise_slot is None else noise_slot, NOISE)
    return tuple(segs) + (QUERY_IMAGE, QUERY_TEXT)


def _check_layout(layout, n_retrieved: int) -> None:
    layout = list(layout)
    if layout[-2:] != [QUERY_IMAGE, QUERY_TEXT]:
        raise ValueError("layout must end with query_image, query_text")
    head = layout[:-2]
    if head.count(NOISE) != 1:
        raise ValueError("layout must contain exactly one noise segment")
    head.remove(NOISE)
    if head != [retrieved_segment(i) for i in range(1, n_retrieved + 1)]:
        raise ValueError(f"layout snippet segments {head} do not match {n_retrieved} retrieved snippets")


@dataclass(frozen=True)
class TrainingInstance:
    snippets: tuple[KnowledgeSnippet, ...]
    noise: KnowledgeSnippet
    query_text: str
    query_image_ref: str
    gold_entity_name: str
    answer: str
    layout: tuple[str, ...]

    def __post_init__(self):
        _check_layout(self.layout, len(self.snippets))
        if normalize_name(self.noise.entity.entity_name) == normalize_name(self.gold_entity_name):
            raise ValueError("noise entity matches the gold entity")

    def segments(self) -> Iterator[tuple[str, object]]:
        """Yield ``(segment_name, payload)`` in interleaved order."""
        for seg in self.layout:
            if seg == NOISE:
                yield seg, self.noise
            elif seg == QUERY_IMAGE:
                yield seg, self.query_image_ref
            elif seg == QUERY_TEXT:
                yield seg, self.query_text
            else:
                yield seg, self.snippets[int(seg.split(":")[1]) - 1]

    def to_prompt(self, image_token: str = IMAGE_TOKEN) -> tuple[str, list[str]]:
        """Render the interleaved input as text with image placeholders.

        Returns the prompt and the image references in placeholder order.
        """
        parts, images = [], []
        for seg, payload in self.segments():
            if seg == QUERY_IMAGE:
                parts.append(image_token)
                images.append(payload)
            elif seg == QUERY_TEXT:
                parts.append(payload)
            else:
                snip = payload
                parts.append(image_token)
                images.append(snip.entity.image_ref)
                parts.extend(snip.passages)
        return "\n".join(parts), images


def serialize_instance(instance: TrainingInstance) -> str:
    record = {
        "layout": list(instance.layout),
        "snippets": [s.to_dict() for s in instance.snippets],
        "noise": instance.noise.to_dict(),
        "query_text": instance.query_text,
        "query_image_ref": instance.query_image_ref,
        "gold_entity_name": instance.gold_entity_name,
        "answer": instance.answer,
    }
    return json.dumps(record, ensure_ascii=False)


def parse_instance(line: str, lineno: int | None = None) -> TrainingInstance:
    try:
        obj = json.loads(line)
        if not isinstance(obj, dict):
            raise ValueError("record must be an object")
        missing = {"layout", "snippets", "noise", "query_text", "query_image_ref", "answer"} - set(obj)
        if missing:
            raise ValueError(f"missing fields {sorted(missing)}")
        return TrainingInstance(
            snippets=tuple(KnowledgeSnippet.from_dict(s) for s in obj["snippets"]),
            noise=KnowledgeSnippet.from_dict(obj["noise"]),
            query_text=obj["query_text"],
            query_image_ref=obj["query_image_ref"],
            gold_entity_name=obj.get("gold_entity_name", ""),
            answer=obj["answer"],
            layout=tuple(obj["layout"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad training record: {exc}", line=lineno) from exc


def read_dataset(path: str | os.PathLike) -> Iterator[TrainingInstance]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield parse_instance(line, lineno)


def build_instance(
    pipeline: RetrievalPipeline,
    query: MultimodalQuery,
    gold_entity_name: str,
    answer: str,
    seed,
    shuffle_noise: bool = False,
) -> TrainingInstance:
    k = pipeline.config.k
    if k < 2:
        raise ValueError("noise injection needs k >= 2 (k-1 retrieved snippets plus one noise)")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    entity_seed, slot_seed = seed.spawn(2)
    snippets = pipeline.retrieve(query, k=k - 1)
    noise_entity = pipeline.store.sample_mismatched(gold_entity_name, entity_seed)
    passages, error = fetch_passages(
        pipeline.backend, entity_context(noise_entity, pipeline.config.expansion_limit), pipeline.config
    )
    noise = KnowledgeSnippet(noise_entity, passages, None, error)
    slot = None
    if shuffle_noise:
        slot = int(np.random.default_rng(slot_seed).integers(len(snippets) + 1))
    return TrainingInstance(
        snippets=tuple(snippets),
        noise=noise,
        query_text=query.text,
        query_image_ref=query.image_ref,
        gold_entity_name=gold_entity_name,
        answer=answer,
        layout=default_layout(len(snippets), slot),
    )


@dataclass(frozen=True)
class AnnotatedQuery:
    query: MultimodalQuery
    gold_entity_name: str
    answer: str
    query_id: str = ""


@dataclass
class DatasetSummary:
    instances: int = 0
    skipped: int = 0
    passages: int = 0
    passage_tokens: int = 0
    max_passage_tokens: int = 0
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "instances": self.instances,
            "skipped": self.skipped,
            "passages": self.passages,
            "passage_tokens": self.passage_tokens,
            "max_passage_tokens": self.max_passage_tokens,
            "failures": self.failures,
        }


def build_dataset(
    pipeline: RetrievalPipeline,
    queries: Iterable[AnnotatedQuery],
    out_path: str | os.PathLike,
    seed: int = 0,
    shuffle_noise: bool = False,
    workers: int = 1,
) -> DatasetSummary:
    """Write one instance per query; failing queries are logged and skipped.

    Query ``i`` draws its noise from ``SeedSequence([seed, i])`` so output is
    independent of ``workers``.
    """
    queries = list(queries)

    def one(item):
        i, aq = item
        try:
            return build_instance(
                pipeline, aq.query, aq.gold_entity_name, aq.answer,
                np.random.SeedSequence([seed, i]), shuffle_noise,
            ), None
        except (VlragError, ValueError) as exc:
            logger.warning("skipping query %s: %s", aq.query_id or i, exc)
            return None, {"index": i, "query_id": aq.query_id, "error": str(exc)}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, enumerate(queries)))
    else:
        results = [one(item) for item in enumerate(queries)]

    summary = DatasetSummary()
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        for instance, failure in results:
            if instance is None:
                summary.skipped += 1
                summary.failures.append(failure)
                continue
            fh.write(serialize_instance(instance))
            fh.write("\n")
            summary.instances += 1
            for snip in instance.snippets + (instance.noise,):
                for passage in snip.passages:
                    n = count_tokens(passage)
                    summary.passages += 1
                    summary.passage_tokens += n
                    summary.max_passage_tokens = max(summary.max_passage_tokens, n)
    return summary


def audit_dataset(path: str | os.PathLike) -> dict:
    """Scan a dataset file without the model classes and count contract violations.

    Checks each raw record for a noise entity equal to the gold entity and for
    a layout other than ``[r1 .. r_{k-1}, noise, I, q]``.
    """
    records = collisions = bad_layout = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records += 1
            noise_name = " ".join(obj["noise"]["entity_name"].split()).casefold()
            gold_name = " ".join(obj.get("gold_entity_name", "").split()).casefold()
            if noise_name == gold_name:
                collisions += 1
            n = len(obj["snippets"])
            expected = [f"retrieved:{i}" for i in range(1, n + 1)] + ["noise", "query_image", "query_text"]
            if obj["layout"] != expected:
                bad_layout += 1
    return {"records": records, "collisions": collisions, "bad_layout": bad_layout}
