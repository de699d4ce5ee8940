"""Text-retrieval backends for the query-expanded second stage."""

from __future__ import annotations

import json
import logging
import os
import time
from abc import ABC, abstractmethod
from collections import Counter, defaultdict
from typing import Callable, Iterable, NamedTuple

import requests

from .errors import BackendError, ParseError
from .text import scoring_terms

logger = logging.getLogger(__name__)

API_KEY_ENV = "VLRAG_SEARCH_API_KEY"


class ScoredPassage(NamedTuple):
    text: str
    score: float


class TextRetrieverBackend(ABC):
    """Given an expanded query and ``l``, return at most ``l`` passages, best first."""

    @abstractmethod
    def search(self, query: str, l: int) -> list[ScoredPassage]:
        ...


class LocalLexicalBackend(TextRetrieverBackend):
    """Offline ranker: score = number of distinct query terms present in the passage.

    Zero-score passages are never returned; ties go to the lower passage id.
    """

    def __init__(self, passages: Iterable[tuple[int, str]]):
        self._texts: dict[int, str] = {}
        self._postings: dict[str, list[int]] = defaultdict(list)
        for pid, text in passages:
            pid = int(pid)
            if pid in self._texts:
                raise ValueError(f"duplicate passage id {pid}")
            if not text or not text.strip():
                raise ValueError(f"passage {pid} is empty")
            self._texts[pid] = text
            for term in set(scoring_terms(text)):
                self._postings[term].append(pid)

    def __len__(self) -> int:
        return len(self._texts)

    def score_all(self, query: str) -> dict[int, int]:
        counts: Counter[int] = Counter()
        for term in set(scoring_terms(query)):
            for pid in self._postings.get(term, ()):
                counts[pid] += 1
        return dict(counts)

    def search(self, query: str, l: int) -> list[ScoredPassage]:
        if l < 1:
            raise ValueError("l must be >= 1")
        ranked = sorted(self.score_all(query).items(), key=lambda kv: (-kv[1], kv[0]))
        return [ScoredPassage(self._texts[pid], float(score)) for pid, score in ranked[:l]]


def load_corpus(path: str | os.PathLike) -> LocalLexicalBackend:
    """Load a JSON-lines passage corpus (``{"id": int, "text": str}`` per line)."""
    passages = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                passages.append((int(obj["id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad corpus record: {exc}", line=lineno) from exc
    return LocalLexicalBackend(passages)


class RemoteSearchBackend(TextRetrieverBackend):
    """JSON-over-HTTP web search client.

    Sends ``POST {"query": ..., "num_results": l}`` and expects a JSON array
    of ``{"text": str, "score": number}``. Transport errors, 429 and 5xx
    responses are retried with exponential backoff; anything still failing
    surfaces as :class:`BackendError`. The API key is read from the
    ``VLRAG_SEARCH_API_KEY`` environment variable and sent as ``X-API-KEY``.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 10.0,
        retries: int = 2,
        backoff: float = 0.5,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._session = session or requests.Session()
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["X-API-KEY"] = key
        return headers

    def _post(self, payload: dict):
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._session.post(
                    self.endpoint, json=payload, headers=self._headers(), timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_exc = exc
                logger.debug("search attempt %d failed: %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_exc = requests.HTTPError(f"HTTP {resp.status_code}", response=resp)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"search endpoint returned HTTP {resp.status_code}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendError("search endpoint returned invalid JSON") from exc
        raise BackendError(
            f"search endpoint failed after {self.retries + 1} attempts: {last_exc}"
        ) from last_exc

    def search(self, query: str, l: int) -> list[ScoredPassage]:
        if l < 1:
            raise ValueError("l must be >= 1")
        body = self._post({"query": query, "num_results": l})
        if not isinstance(body, list):
            raise BackendError("search response must be a JSON array")
        out = []
        for item in body:
            try:
                text, score = item["text"], float(item["score"])
            except (TypeError, KeyError, ValueError) as exc:
                raise BackendError(f"malformed search result {item!r}") from exc
            if isinstance(text, str) and text.strip():
                out.append(ScoredPassage(text, score))
        return out[:l]
