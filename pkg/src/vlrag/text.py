"""Tokenization and normalization helpers.

Tokens are maximal runs of non-whitespace (``str.split()`` semantics). The
truncation and token-count helpers work on these raw tokens; lexical scoring
additionally case-folds and strips surrounding punctuation.
"""

from __future__ import annotations

import re
import string
import unicodedata

_TOKEN = re.compile(r"\S+")
_WS = re.compile(r"\s+")


def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def strip_punct(text: str) -> str:
    start, end = 0, len(text)
    while start < end and _is_punct(text[start]):
        start += 1
    while end > start and _is_punct(text[end - 1]):
        end -= 1
    return text[start:end]


def tokenize(text: str) -> list[str]:
    return text.split()


def count_tokens(text: str) -> int:
    return len(text.split())


def scoring_terms(text: str) -> list[str]:
    """Case-folded tokens with leading/trailing punctuation removed; empties dropped."""
    out = []
    for tok in text.split():
        term = strip_punct(tok.casefold())
        if term:
            out.append(term)
    return out


def truncate_tokens(text: str, limit: int) -> str:
    """Keep the first ``limit`` tokens, preserving the original text verbatim up to there."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    for i, match in enumerate(_TOKEN.finditer(text)):
        if i == limit - 1:
            end = match.end()
            return text if _TOKEN.search(text, end) is None else text[:end]
    return text


def collapse_ws(text: str) -> str:
    return _WS.sub(" ", text).strip()


def normalize_name(name: str) -> str:
    """Identity key for entity names: case-folded, whitespace collapsed."""
    return collapse_ws(name).casefold()


def normalize_answer(text: str) -> str:
    """Matching key for answers: case-folded, whitespace collapsed, outer punctuation stripped."""
    return strip_punct(collapse_ws(text.casefold())).strip()
