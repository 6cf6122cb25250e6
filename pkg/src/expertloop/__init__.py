"""Budgeted expert-in-the-loop test-time learning runtime."""

from .errors import ExpertLoopError
from .kr import (
    ContentKind,
    ItemStatus,
    KnowledgeContent,
    KnowledgeItem,
    KnowledgeRepository,
    ScoredItem,
    ScoringParams,
    Source,
    TransitionCause,
    composite_score,
)
from .similarity import EmbeddingCache, SimilarityParams, cosine, embed_fallback, sim_content

__all__ = [
    "ExpertLoopError",
    "ContentKind",
    "ItemStatus",
    "KnowledgeContent",
    "KnowledgeItem",
    "KnowledgeRepository",
    "ScoredItem",
    "ScoringParams",
    "Source",
    "TransitionCause",
    "composite_score",
    "EmbeddingCache",
    "SimilarityParams",
    "cosine",
    "embed_fallback",
    "sim_content",
]

__version__ = "0.1.0"
