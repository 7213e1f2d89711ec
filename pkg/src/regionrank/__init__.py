"""Region-level document retrieval over OCR bounding boxes.

Late-interaction patch similarities from a vision retriever are propagated
onto OCR regions, which are then ranked and thresholded so downstream
readers see only the relevant parts of a page.
"""

from .evaluation import (
    AblationGrid,
    EvalReport,
    GroupMetrics,
    SampleOutcome,
    VarianceParts,
    run_ablation,
    run_evaluation,
)
from .formats import (
    EvalSample,
    OcrRegion,
    PageEmbedding,
    PageRecord,
    QueryEmbedding,
    load_eval_samples,
    load_page_records,
    load_query_embeddings,
    read_page_embedding,
    read_query_embedding,
    write_page_embedding,
    write_query_embedding,
)
from .geometry import BBox, PatchCoverage, PatchGrid, covered, iou, patch_bbox, scale_bbox
from .index import CorpusIndex, RetrievalResult, build_index, load_index, retrieve
from .scoring import (
    RegionRanking,
    RegionScore,
    ScoringConfig,
    SimilarityMatrix,
    page_score,
    patch_scores,
    rank_regions,
    score_regions,
    similarity_matrix,
)

__version__ = "0.1.0"

__all__ = [
    "AblationGrid",
    "BBox",
    "CorpusIndex",
    "EvalReport",
    "EvalSample",
    "GroupMetrics",
    "OcrRegion",
    "PageEmbedding",
    "PageRecord",
    "PatchCoverage",
    "PatchGrid",
    "QueryEmbedding",
    "RegionRanking",
    "RegionScore",
    "RetrievalResult",
    "SampleOutcome",
    "ScoringConfig",
    "SimilarityMatrix",
    "VarianceParts",
    "build_index",
    "covered",
    "iou",
    "load_eval_samples",
    "load_index",
    "load_page_records",
    "load_query_embeddings",
    "page_score",
    "patch_bbox",
    "patch_scores",
    "rank_regions",
    "read_page_embedding",
    "read_query_embedding",
    "retrieve",
    "run_ablation",
    "run_evaluation",
    "scale_bbox",
    "score_regions",
    "similarity_matrix",
    "write_page_embedding",
    "write_query_embedding",
]
