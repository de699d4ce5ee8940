"""Two-stage multimodal retrieval augmentation over precomputed embeddings."""

from .backends import LocalLexicalBackend, RemoteSearchBackend, ScoredPassage, TextRetrieverBackend
from .embedding import (
    ScoredId,
    cosine_similarity,
    read_embedding_file,
    softmax_scores,
    top_k,
    write_embedding_file,
)
from .evaluation import (
    EvalRecord,
    MetricReport,
    avg_pool_baseline,
    entity_position_histogram,
    evaluate,
    relaxed_accuracy,
    stage1_hit,
    stage2_hit,
    vqa_accuracy,
)
from .index import HnswIndex, HnswParams, build_index, exact_search
from .pipeline import (
    KnowledgeSnippet,
    MultimodalQuery,
    RetrievalConfig,
    RetrievalPipeline,
    expand_query,
    retrieve,
    stage1_retrieve,
    stage2_retrieve,
    truncate_passage,
)
from .refine import TokenSelection, refine_query_tokens, refine_retrieved_tokens
from .store import EntityRecord, EntityStore, load_store, save_store
from .training import TrainingInstance, build_dataset, build_instance, parse_instance, serialize_instance

__version__ = "0.1.0"

__all__ = [
    "EntityRecord",
    "EntityStore",
    "EvalRecord",
    "HnswIndex",
    "HnswParams",
    "KnowledgeSnippet",
    "LocalLexicalBackend",
    "MetricReport",
    "MultimodalQuery",
    "RemoteSearchBackend",
    "RetrievalConfig",
    "RetrievalPipeline",
    "ScoredId",
    "ScoredPassage",
    "TextRetrieverBackend",
    "TokenSelection",
    "TrainingInstance",
    "avg_pool_baseline",
    "build_dataset",
    "build_index",
    "build_instance",
    "cosine_similarity",
    "entity_position_histogram",
    "evaluate",
    "exact_search",
    "expand_query",
    "load_store",
    "parse_instance",
    "read_embedding_file",
    "refine_query_tokens",
    "refine_retrieved_tokens",
    "relaxed_accuracy",
    "retrieve",
    "save_store",
    "serialize_instance",
    "softmax_scores",
    "stage1_hit",
    "stage1_retrieve",
    "stage2_hit",
    "stage2_retrieve",
    "top_k",
    "truncate_passage",
    "vqa_accuracy",
    "write_embedding_file",
]
