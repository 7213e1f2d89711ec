"""Embedding exporter for the regionrank engine's wire format."""

from .backends import (
    BOS_TOKEN,
    EOS_TOKEN,
    SPECIAL_TOKENS,
    ColPaliBackend,
    EmbeddingBackend,
    HashBackend,
    make_backend,
)
from .config import (
    DEFAULT_DIM,
    DEFAULT_GRID_SIDE,
    DEFAULT_INPUT_SIDE,
    HASH_MODEL_ID,
    AdapterConfig,
    AdapterError,
)
from .export import MANIFEST_NAME, export_pages, export_queries

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterError",
    "BOS_TOKEN",
    "ColPaliBackend",
    "DEFAULT_DIM",
    "DEFAULT_GRID_SIDE",
    "DEFAULT_INPUT_SIDE",
    "EOS_TOKEN",
    "EmbeddingBackend",
    "HASH_MODEL_ID",
    "HashBackend",
    "MANIFEST_NAME",
    "SPECIAL_TOKENS",
    "export_pages",
    "export_queries",
    "make_backend",
    "__version__",
]
