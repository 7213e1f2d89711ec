"""Late-interaction scoring and region-level aggregation.

The pipeline is: compute the token-by-patch cosine similarity matrix,
collapse it over query tokens into one relevance score per patch, then
aggregate patch scores over each OCR region's covered patches.  Regions are
ranked by aggregate score and a percentile threshold picks which ones to
keep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .formats import OcrRegion, PageEmbedding, QueryEmbedding
from .geometry import PatchCoverage, PatchGrid, covered, scale_bbox

TOKEN_AGGREGATIONS = ("max", "mean", "sum")
STRATEGIES = ("max", "mean", "iou_weighted")

DEFAULT_PERCENTILE = 50.0
DEFAULT_MIN_OVERLAP = 0.25


class NoCoverageError(ValueError):
    """Raised when a region overlaps no patch and so has no scoring support."""


@dataclass(frozen=True)
class ScoringConfig:
    """Knobs of the patch-to-region scoring pipeline.

    Attributes:
        token_agg: How patch scores collapse over query tokens: ``max``
            (strongest token match), ``mean``, or ``sum``.
        strategy: Region aggregation over covered patches: ``max``, ``mean``,
            or ``iou_weighted`` (IoU-normalized weighted mean).
        percentile: Selection threshold percentile over region scores,
            in [0, 100].
        min_overlap: Minimum patch overlap fraction for a patch to count as
            covered, in [0, 1].
    """

    token_agg: str = "max"
    strategy: str = "max"
    percentile: float = DEFAULT_PERCENTILE
    min_overlap: float = DEFAULT_MIN_OVERLAP

    def __post_init__(self) -> None:
        if self.token_agg not in TOKEN_AGGREGATIONS:
            raise ValueError(
                f"token_agg must be one of {TOKEN_AGGREGATIONS}, "
                f"got {self.token_agg!r}"
            )
        if self.strategy not in STRATEGIES:
            raise ValueError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}"
            )
        if not 0.0 <= self.percentile <= 100.0:
            raise ValueError(
                f"percentile must be in [0, 100], got {self.percentile}"
            )
        if not 0.0 <= self.min_overlap <= 1.0:
            raise ValueError(
                f"min_overlap must be in [0, 1], got {self.min_overlap}"
            )


@dataclass(frozen=True)
class SimilarityMatrix:
    """Token-by-patch similarity values, shape (n_tokens, n_patches)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(
                f"similarity matrix must be 2-d and non-empty, got shape "
                f"{arr.shape}"
            )
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class RegionScore:
    """One region's aggregate relevance and its place in the ranking."""

    region_id: str
    score: float
    rank: int
    selected: bool
    coverage_count: int


@dataclass(frozen=True)
class RegionRanking:
    """Ranked regions of one page plus the regions that could not be scored.

    ``scores`` is ordered by descending score (ties keep input order) with
    ranks 1..R.  ``skipped`` lists region ids whose boxes covered no patch at
    the configured overlap threshold.
    """

    scores: tuple[RegionScore, ...]
    skipped: tuple[str, ...] = ()

    def selected_ids(self) -> list[str]:
        return [entry.region_id for entry in self.scores if entry.selected]


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return matrix / safe


def similarity_matrix(query: QueryEmbedding, page: PageEmbedding) -> SimilarityMatrix:
    """Cosine similarity between every query token and every patch.

    Zero vectors on either side produce zero similarity rather than NaN.
    Values are clipped to [-1, 1] to absorb float rounding.
    """
    if query.dim != page.dim:
        raise ValueError(
            f"query dim {query.dim} does not match page dim {page.dim}"
        )
    q = _normalize_rows(query.vectors)
    d = _normalize_rows(page.patch_vectors)
    values = np.clip(q @ d.T, -1.0, 1.0)
    return SimilarityMatrix(values)


def patch_scores(matrix: SimilarityMatrix, token_agg: str = "max") -> np.ndarray:
    """Collapses the similarity matrix over query tokens, one score per patch."""
    if token_agg not in TOKEN_AGGREGATIONS:
        raise ValueError(
            f"token_agg must be one of {TOKEN_AGGREGATIONS}, got {token_agg!r}"
        )
    values = matrix.values
    if token_agg == "max":
        return values.max(axis=0)
    if token_agg == "mean":
        return values.mean(axis=0)
    return values.sum(axis=0)


def page_score(matrix: SimilarityMatrix) -> float:
    """Late-interaction page relevance: sum over tokens of the best patch."""
    return float(matrix.values.max(axis=1).sum())


def aggregate_region(
    patch_score_vec: np.ndarray,
    coverage: Sequence[PatchCoverage],
    strategy: str,
) -> float:
    """Aggregates patch scores over one region's covered patches.

    ``iou_weighted`` takes the IoU-normalized weighted mean, so patches that
    align tightly with the region dominate.  All strategies return a value
    within the [min, max] range of the covered patch scores, which makes the
    result equivariant under affine rescaling of the scores.

    Raises:
        NoCoverageError: ``coverage`` is empty; the region has no support.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    if not coverage:
        raise NoCoverageError("region covers no patches at this overlap threshold")
    scores = [float(patch_score_vec[entry.patch_index]) for entry in coverage]
    if strategy == "max":
        return max(scores)
    if strategy == "mean":
        return sum(scores) / len(scores)
    weight_total = 0.0
    weighted = 0.0
    for entry, score in zip(coverage, scores):
        weight_total += entry.iou
        weighted += entry.iou * score
    # Covered patches have positive intersection, hence positive IoU.
    return weighted / weight_total


def select_regions(scores: Sequence[float], percentile: float) -> list[bool]:
    """Marks which scores pass the percentile threshold.

    The threshold is the linearly interpolated ``percentile`` of the score
    multiset; a region is selected when its score is >= the threshold.  The
    top score is always selected regardless of rounding.

    Raises:
        ValueError: ``scores`` is empty or ``percentile`` out of range.
    """
    if len(scores) == 0:
        raise ValueError("cannot select from an empty score list")
    if not 0.0 <= percentile <= 100.0:
        raise ValueError(f"percentile must be in [0, 100], got {percentile}")
    arr = np.asarray(scores, dtype=np.float64)
    threshold = float(np.percentile(arr, percentile))
    flags = [bool(value >= threshold) for value in arr]
    flags[int(np.argmax(arr))] = True
    return flags


def score_regions(
    patch_score_vec: np.ndarray,
    regions: Sequence[OcrRegion],
    page_width: float,
    page_height: float,
    grid: PatchGrid,
    config: ScoringConfig,
) -> RegionRanking:
    """Scores, ranks, and selects OCR regions given per-patch scores.

    Region boxes are rescaled from page space into model space, their covered
    patches collected at ``config.min_overlap``, and patch scores aggregated
    per ``config.strategy``.  Regions with no covered patch are reported in
    ``skipped`` instead of being ranked.
    """
    scored: list[tuple[str, float, int]] = []
    skipped: list[str] = []
    for region in regions:
        box = scale_bbox(region.bbox, page_width, page_height, grid)
        coverage = covered(box, grid, config.min_overlap)
        if not coverage:
            skipped.append(region.region_id)
            continue
        value = aggregate_region(patch_score_vec, coverage, config.strategy)
        scored.append((region.region_id, value, len(coverage)))

    if not scored:
        return RegionRanking(scores=(), skipped=tuple(skipped))

    # Stable sort keeps input order among equal scores.
    order = sorted(range(len(scored)), key=lambda i: scored[i][1], reverse=True)
    flags = select_regions([scored[i][1] for i in order], config.percentile)
    ranked = tuple(
        RegionScore(
            region_id=scored[i][0],
            score=scored[i][1],
            rank=rank,
            selected=flag,
            coverage_count=scored[i][2],
        )
        for rank, (i, flag) in enumerate(zip(order, flags), start=1)
    )
    return RegionRanking(scores=ranked, skipped=tuple(skipped))


def rank_regions(
    query: QueryEmbedding,
    page: PageEmbedding,
    regions: Sequence[OcrRegion],
    page_width: float,
    page_height: float,
    config: ScoringConfig,
) -> RegionRanking:
    """Full per-page pipeline: similarity, patch scores, region ranking."""
    matrix = similarity_matrix(query, page)
    vec = patch_scores(matrix, config.token_agg)
    return score_regions(
        vec, regions, page_width, page_height, page.grid, config
    )
