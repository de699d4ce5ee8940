"""Retrieval precision, answer accuracy and snippet-position statistics.

All string matching goes through :func:`vlrag.text.normalize_answer`
(case-folded, whitespace collapsed, outer punctuation stripped).
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import EmptyInputError, ShapeError
from .text import normalize_answer

DEFAULT_TOLERANCE = 0.05
DEFAULT_BUCKET_WIDTH = 50


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    gold_entity_name: str = ""
    gold_answers: tuple[str, ...] = ()
    numeric_gold: float | None = None
    stage1_entities: tuple[str, ...] | None = None
    stage2_passages: tuple[str, ...] | None = None
    prediction: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalRecord":
        if not isinstance(obj, dict):
            raise ValueError("record must be an object")

        def strings(key):
            value = obj.get(key)
            if value is None:
                return None
            if isinstance(value, str) or not all(isinstance(v, str) for v in value):
                raise ValueError(f"{key} must be a list of strings")
            return tuple(value)

        numeric = obj.get("numeric_gold")
        if numeric is not None and (isinstance(numeric, bool) or not isinstance(numeric, (int, float))):
            raise ValueError("numeric_gold must be a number")
        prediction = obj.get("prediction")
        if prediction is not None and not isinstance(prediction, str):
            prediction = str(prediction)
        return cls(
            query_id=str(obj.get("query_id", obj.get("id", ""))),
            gold_entity_name=str(obj.get("gold_entity_name", "")),
            gold_answers=strings("gold_answers") or (),
            numeric_gold=None if numeric is None else float(numeric),
            stage1_entities=strings("stage1_entities"),
            stage2_passages=strings("stage2_passages"),
            prediction=prediction,
        )


def load_eval_records(path: str | os.PathLike) -> tuple[list[EvalRecord], list[tuple[int, str]]]:
    """Parse a JSON-lines file; malformed lines are returned as ``(line, error)``."""
    records, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(EvalRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                errors.append((lineno, str(exc)))
    return records, errors


class Rate(NamedTuple):
    hits: int
    evaluated: int

    @property
    def value(self) -> float | None:
        return self.hits / self.evaluated if self.evaluated else None


def stage1_hit(record: EvalRecord) -> bool:
    gold = normalize_answer(record.gold_entity_name)
    return bool(gold) and any(normalize_answer(e) == gold for e in record.stage1_entities or ())


def stage2_hit(record: EvalRecord) -> bool:
    aliases = [a for a in (normalize_answer(x) for x in record.gold_answers) if a]
    if not aliases:
        return False
    for passage in record.stage2_passages or ():
        text = normalize_answer(passage)
        if any(a in text for a in aliases):
            return True
    return False


def vqa_hit(record: EvalRecord) -> bool:
    pred = normalize_answer(record.prediction or "")
    return any(pred == normalize_answer(a) for a in record.gold_answers)


_NUMBER_WRAP = "\"'()[]{}!?;:"


def parse_number(text: str) -> float | None:
    """Parse a numeric prediction, allowing thousands separators and a trailing period."""
    cleaned = text.strip().strip(_NUMBER_WRAP).strip().replace(",", "")
    try:
        value = float(cleaned)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def relaxed_hit(record: EvalRecord, tolerance: float = DEFAULT_TOLERANCE) -> bool:
    gold = record.numeric_gold
    pred = parse_number(record.prediction or "")
    if gold is None or pred is None:
        return False
    if gold == 0:
        return pred == 0
    return abs(pred - gold) <= tolerance * abs(gold)


def stage1_rate(records: Iterable[EvalRecord]) -> Rate:
    evaluated = [r for r in records if r.stage1_entities is not None]
    return Rate(sum(stage1_hit(r) for r in evaluated), len(evaluated))


def stage2_rate(records: Iterable[EvalRecord]) -> Rate:
    evaluated = [r for r in records if r.stage2_passages is not None]
    return Rate(sum(stage2_hit(r) for r in evaluated), len(evaluated))


def vqa_rate(records: Iterable[EvalRecord]) -> Rate:
    evaluated = [r for r in records if r.prediction is not None and r.gold_answers]
    return Rate(sum(vqa_hit(r) for r in evaluated), len(evaluated))


def relaxed_rate(records: Iterable[EvalRecord], tolerance: float = DEFAULT_TOLERANCE) -> Rate:
    evaluated = [r for r in records if r.prediction is not None and r.numeric_gold is not None]
    return Rate(sum(relaxed_hit(r, tolerance) for r in evaluated), len(evaluated))


def _require(rate: Rate, what: str) -> float:
    if not rate.evaluated:
        raise EmptyInputError(f"no records evaluable for {what}")
    return rate.value


def vqa_accuracy(records: Iterable[EvalRecord]) -> float:
    """Exact normalized match of the prediction against any gold alias.

    Records without a prediction are excluded; see :func:`vqa_rate` for counts.
    """
    return _require(vqa_rate(records), "VQA accuracy")


def relaxed_accuracy(records: Iterable[EvalRecord], tolerance: float = DEFAULT_TOLERANCE) -> float:
    return _require(relaxed_rate(records, tolerance), "relaxed accuracy")


@dataclass
class PositionHistogram:
    bucket_width: int
    counts: dict[int, int] = field(default_factory=dict)  # bucket start -> mentions
    found: int = 0
    excluded: int = 0

    @property
    def examined(self) -> int:
        return self.found + self.excluded

    def fraction_below(self, position: int) -> float | None:
        """Share of found mentions whose preceding-token count is below ``position``.

        ``position`` must be a multiple of the bucket width.
        """
        if position % self.bucket_width:
            raise ValueError("position must align with bucket boundaries")
        if not self.found:
            return None
        return sum(c for start, c in self.counts.items() if start < position) / self.found

    def to_csv(self) -> str:
        lines = ["bucket_start,bucket_end,count"]
        if self.counts:
            for start in range(0, max(self.counts) + 1, self.bucket_width):
                lines.append(f"{start},{start + self.bucket_width},{self.counts.get(start, 0)}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "bucket_width": self.bucket_width,
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
            "found": self.found,
            "excluded": self.excluded,
        }


def mention_position(passage: str, entity_name: str) -> int | None:
    """Number of whitespace tokens before the first mention of ``entity_name``.

    Matching is case-insensitive, tolerates any whitespace between the
    name's words, and requires non-word characters (or text edges) around it.
    """
    words = entity_name.casefold().split()
    if not words:
        return None
    pattern = r"(?<!\w)" + r"\s+".join(re.escape(w) for w in words) + r"(?!\w)"
    folded = passage.casefold()
    match = re.search(pattern, folded)
    if match is None:
        return None
    prefix = folded[: match.start()]
    count = len(prefix.split())
    if prefix and not prefix[-1].isspace():
        count -= 1  # the mention starts inside a token such as "(Eiffel"
    return count


def entity_position_histogram(
    records: Iterable[EvalRecord], bucket_width: int = DEFAULT_BUCKET_WIDTH
) -> PositionHistogram:
    if bucket_width < 1:
        raise ValueError("bucket_width must be >= 1")
    hist = PositionHistogram(bucket_width)
    for rec in records:
        if not rec.gold_entity_name.strip():
            continue
        for passage in rec.stage2_passages or ():
            pos = mention_position(passage, rec.gold_entity_name)
            if pos is None:
                hist.excluded += 1
                continue
            start = (pos // bucket_width) * bucket_width
            hist.counts[start] = hist.counts.get(start, 0) + 1
            hist.found += 1
    return hist


def avg_pool_baseline(patch_embeddings, kernel: int = 2, stride: int = 2) -> np.ndarray:
    """Average-pool an ``n x d`` patch sequence laid out on a square grid.

    The grid is row-major ``sqrt(n) x sqrt(n)``; windows that do not fit are
    dropped (floor), so ``n = 576`` becomes 144 tokens with the defaults.
    """
    x = np.asarray(patch_embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected (n, d) patch embeddings, got shape {x.shape}")
    n, d = x.shape
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeError(f"{n} patches do not form a square grid")
    if kernel < 1 or stride < 1 or side < kernel:
        raise ShapeError(f"kernel {kernel} does not fit a {side}x{side} grid")
    out_side = (side - kernel) // stride + 1
    grid = x.reshape(side, side, d)
    pooled = np.empty((out_side, out_side, d))
    for i in range(out_side):
        for j in range(out_side):
            r, c = i * stride, j * stride
            pooled[i, j] = grid[r : r + kernel, c : c + kernel].mean(axis=(0, 1))
    return pooled.reshape(out_side * out_side, d)


@dataclass
class MetricReport:
    stage1: Rate
    stage2: Rate
    vqa: Rate
    relaxed: Rate
    missing_predictions: int
    histogram: PositionHistogram
    tolerance: float = DEFAULT_TOLERANCE
    malformed: list[tuple[int, str]] = field(default_factory=list)

    @property
    def stage1_precision(self) -> float | None:
        return self.stage1.value

    @property
    def stage2_precision(self) -> float | None:
        return self.stage2.value

    @property
    def vqa_accuracy(self) -> float | None:
        return self.vqa.value

    @property
    def relaxed_accuracy(self) -> float | None:
        return self.relaxed.value

    @property
    def evaluable(self) -> bool:
        return any(r.evaluated for r in (self.stage1, self.stage2, self.vqa, self.relaxed))

    def to_dict(self) -> dict:
        metrics = {}
        for name, rate in (("stage1_precision", self.stage1), ("stage2_precision", self.stage2),
                           ("vqa_accuracy", self.vqa), ("relaxed_accuracy", self.relaxed)):
            metrics[name] = {"value": rate.value, "hits": rate.hits, "evaluated": rate.evaluated}
        return {
            "metrics": metrics,
            "tolerance": self.tolerance,
            "missing_predictions": self.missing_predictions,
            "position_histogram": self.histogram.to_dict(),
            "malformed": [{"line": line, "error": err} for line, err in self.malformed],
        }

    def format_table(self) -> str:
        rows = [("metric", "value", "hits", "evaluated")]
        for name, rate in (("stage-1 precision", self.stage1), ("stage-2 precision", self.stage2),
                           ("VQA accuracy", self.vqa), (f"relaxed accuracy ({self.tolerance:.0%})", self.relaxed)):
            value = "n/a" if rate.value is None else f"{100 * rate.value:.2f}%"
            rows.append((name, value, str(rate.hits), str(rate.evaluated)))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.missing_predictions:
            lines.append(f"({self.missing_predictions} records without a prediction)")
        return "\n".join(lines)


def evaluate(
    records: Sequence[EvalRecord],
    tolerance: float = DEFAULT_TOLERANCE,
    bucket_width: int = DEFAULT_BUCKET_WIDTH,
) -> MetricReport:
    records = list(records)
    return MetricReport(
        stage1=stage1_rate(records),
        stage2=stage2_rate(records),
        vqa=vqa_rate(records),
        relaxed=relaxed_rate(records, tolerance),
        missing_predictions=sum(r.prediction is None for r in records),
        histogram=entity_position_histogram(records, bucket_width),
        tolerance=tolerance,
    )
