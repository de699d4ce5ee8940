"""Query-oriented visual token refinement.

The query image keeps the ``m`` patch tokens with the largest dot product
against the text embedding. Each retrieved image then keeps the ``m`` tokens
whose summed dot product with those selected query tokens is largest.
Selections are re-emitted in original patch order; ties go to the lower
patch index.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyInputError

DEFAULT_M = 144


@dataclass(frozen=True)
class TokenSelection:
    indices: np.ndarray  # strictly increasing patch positions
    tokens: np.ndarray  # (len(indices), d)
    scores: np.ndarray  # selection score of each kept token

    def __len__(self) -> int:
        return len(self.indices)


def _as_tokens(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DimensionError(f"{name} must be a non-empty (n, d) array, got shape {arr.shape}")
    return arr


def select_top(scores: np.ndarray, m: int) -> np.ndarray:
    """Indices of the ``m`` largest scores (ties: lower index wins), ascending.

    Bounded min-heap over the scores, O(n log m).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    heap: list[tuple[float, int]] = []
    for i, s in enumerate(scores.tolist()):
        item = (s, -i)
        if len(heap) < m:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)
    return np.array(sorted(-neg for _, neg in heap), dtype=np.int64)


def _selection(tokens: np.ndarray, scores: np.ndarray, m: int) -> TokenSelection:
    idx = select_top(scores, m)
    return TokenSelection(idx, tokens[idx], scores[idx])


def query_token_scores(patch_embeddings, text_embedding) -> np.ndarray:
    patches = _as_tokens(patch_embeddings, "patch_embeddings")
    text = np.asarray(text_embedding, dtype=np.float64)
    if text.ndim != 1 or text.shape[0] != patches.shape[1]:
        raise DimensionError(f"text embedding shape {text.shape} does not match patch dim {patches.shape[1]}")
    return patches @ text


def refine_query_tokens(patch_embeddings, text_embedding, m: int = DEFAULT_M) -> TokenSelection:
    scores = query_token_scores(patch_embeddings, text_embedding)
    return _selection(_as_tokens(patch_embeddings, "patch_embeddings"), scores, m)


def retrieved_token_scores(retrieved_patches, selected_tokens) -> np.ndarray:
    """Per retrieved token: sum of its dot products with every selected query token."""
    patches = _as_tokens(retrieved_patches, "retrieved_patches")
    selected = np.asarray(selected_tokens, dtype=np.float64)
    if selected.ndim != 2 or selected.shape[0] == 0:
        raise EmptyInputError("query selection is empty")
    if selected.shape[1] != patches.shape[1]:
        raise DimensionError(f"selected token dim {selected.shape[1]} != patch dim {patches.shape[1]}")
    return (patches @ selected.T).sum(axis=1)


def summed_query_scores(retrieved_patches, selected_tokens) -> np.ndarray:
    """Same scores via the precomputed sum of selected query tokens (one matvec)."""
    patches = _as_tokens(retrieved_patches, "retrieved_patches")
    selected = np.asarray(selected_tokens, dtype=np.float64)
    if selected.ndim != 2 or selected.shape[0] == 0:
        raise EmptyInputError("query selection is empty")
    if selected.shape[1] != patches.shape[1]:
        raise DimensionError(f"selected token dim {selected.shape[1]} != patch dim {patches.shape[1]}")
    return patches @ selected.sum(axis=0)


def refine_retrieved_tokens(retrieved_patches, query_selection: TokenSelection, m: int = DEFAULT_M) -> TokenSelection:
    scores = retrieved_token_scores(retrieved_patches, query_selection.tokens)
    return _selection(_as_tokens(retrieved_patches, "retrieved_patches"), scores, m)


def selection_mask(indices, n: int, grid_width: int) -> np.ndarray:
    """Boolean patch grid (rows x grid_width) with selected cells set."""
    if grid_width < 1 or n % grid_width:
        raise ValueError(f"{n} patches do not tile a grid of width {grid_width}")
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(indices, dtype=np.int64)] = True
    return mask.reshape(n // grid_width, grid_width)


def format_mask_pbm(mask: np.ndarray) -> str:
    """Plain (P1) portable bitmap; selected cells are black."""
    rows, cols = mask.shape
    body = "\n".join(" ".join("1" if c else "0" for c in row) for row in mask)
    return f"P1\n{cols} {rows}\n{body}\n"


def format_mask_text(mask: np.ndarray) -> str:
    return "\n".join("".join("#" if c else "." for c in row) for row in mask) + "\n"
