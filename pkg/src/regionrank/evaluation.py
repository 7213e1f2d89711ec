"""Evaluation harness: localization quality, token budgets, failure analysis.

Given an index, a set of evaluation samples, and their query embeddings,
this module scores each sample's page, measures how well the top-ranked
region matches the ground-truth evidence boxes, accounts for the context
tokens each policy would spend, classifies failures, and decomposes IoU
variance into within- and between-document parts.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .formats import EvalSample, OcrRegion, QueryEmbedding
from .geometry import BBox, iou
from .index import DEFAULT_CANDIDATES, CorpusIndex, retrieve
from .scoring import (
    RegionScore,
    ScoringConfig,
    patch_scores,
    score_regions,
    similarity_matrix,
)

logger = logging.getLogger(__name__)

HIT = "hit"
OCR_CEILING = "ocr_ceiling"
SELECTION_ERROR = "selection_error"
MISSING_PAGE = "missing_page"
FAILURE_CLASSES = (HIT, OCR_CEILING, SELECTION_ERROR, MISSING_PAGE)

HIT_IOU = 0.5
PARTIAL_IOU = 0.25
DEFAULT_TAUS = (0.25, 0.5, 0.7)

MODES = ("localization", "retrieval")

# Image token model: pages are scaled down to fit a square cap, then cost
# one token per fixed pixel block.
IMAGE_FIT_SIDE = 1568
IMAGE_TOKEN_DIVISOR = 750

OVERALL = "overall"

TokenizerFn = Callable[[str], int]


# ---------------------------------------------------------------------------
# Per-sample measurements
# ---------------------------------------------------------------------------


def best_iou(box: BBox, gt_bboxes: Sequence[BBox]) -> float:
    """Best IoU of ``box`` against any ground-truth box."""
    if not gt_bboxes:
        raise ValueError("gt_bboxes must be non-empty")
    return max(iou(box, gt) for gt in gt_bboxes)


def sample_iou(
    ranked: Sequence[tuple[RegionScore, BBox]],
    gt_bboxes: Sequence[BBox],
) -> tuple[float, float]:
    """IoU of the top-ranked region and of the best selected region.

    Both are measured against the closest ground-truth box.  An empty
    ranking yields (0.0, 0.0).  The second value is always >= the first
    because the top-ranked region is always selected.
    """
    if not ranked:
        return 0.0, 0.0
    top_entry, top_box = ranked[0]
    top = best_iou(top_box, gt_bboxes)
    best_selected = max(
        (best_iou(box, gt_bboxes) for entry, box in ranked if entry.selected),
        default=top,
    )
    return top, max(top, best_selected)


def classify_failure(
    top1_iou: float,
    page_regions: Sequence[OcrRegion],
    gt_bboxes: Sequence[BBox],
) -> str:
    """Assigns a sample to the failure taxonomy.

    ``hit`` when the top region reaches the hit threshold.  Otherwise the
    blame goes to OCR when no region on the page could have reached the
    threshold (``ocr_ceiling``), else to ranking (``selection_error``).
    """
    if top1_iou >= HIT_IOU:
        return HIT
    for region in page_regions:
        if best_iou(region.bbox, gt_bboxes) >= HIT_IOU:
            return SELECTION_ERROR
    return OCR_CEILING


def hit_rate(ious: Sequence[float], tau: float) -> float:
    """Fraction of IoU values at or above ``tau``."""
    if len(ious) == 0:
        raise ValueError("cannot compute a hit rate over zero samples")
    return sum(1 for value in ious if value >= tau) / len(ious)


# ---------------------------------------------------------------------------
# Token accounting
# ---------------------------------------------------------------------------


def image_tokens(width: float, height: float) -> int:
    """Vision token cost of sending a width x height image.

    The image is scaled down (never up) so both sides fit ``IMAGE_FIT_SIDE``,
    with each axis rounded to the nearest pixel, then costs one token per
    ``IMAGE_TOKEN_DIVISOR`` pixels, rounded down.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    factor = min(1.0, IMAGE_FIT_SIDE / width, IMAGE_FIT_SIDE / height)
    if factor < 1.0:
        width = round(width * factor)
        height = round(height * factor)
    return int((width * height) // IMAGE_TOKEN_DIVISOR)


def text_tokens(text: str, tokenizer: TokenizerFn | None = None) -> int:
    """Token cost of a text span.

    Uses the injected tokenizer when given; otherwise approximates with one
    token per four UTF-8 bytes, rounded up.  Empty text costs zero.
    """
    if tokenizer is not None:
        return int(tokenizer(text))
    if not text:
        return 0
    return (len(text.encode("utf-8")) + 3) // 4


def token_savings(method_tokens: float, baseline_tokens: float) -> float:
    """Relative token saving of the method over a baseline, in percent."""
    if baseline_tokens <= 0:
        raise ValueError(
            f"baseline tokens must be positive, got {baseline_tokens}"
        )
    return (baseline_tokens - method_tokens) / baseline_tokens * 100.0


def context_reduction_factor(
    page_area: float, selected_areas: Sequence[float]
) -> float:
    """Page area divided by the total area of selected regions."""
    if page_area <= 0:
        raise ValueError(f"page area must be positive, got {page_area}")
    if not selected_areas:
        raise ValueError("selection is empty, reduction factor is undefined")
    total = float(sum(selected_areas))
    if total <= 0:
        raise ValueError("selected areas must sum to a positive value")
    return page_area / total


# ---------------------------------------------------------------------------
# Variance decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceParts:
    """Within/between-document fractions of total IoU variance.

    Fractions sum to 1 when the total sum of squares is positive.
    ``degenerate`` marks groups where the decomposition is undefined (zero
    total variance); both fractions are then 0 by convention.
    """

    within_fraction: float
    between_fraction: float
    degenerate: bool = False


def variance_decomposition(groups: Mapping[str, Sequence[float]]) -> VarianceParts:
    """One-way decomposition of variance across per-document groups.

    ``groups`` maps a document id to that document's sample values.  Requires
    at least two documents, each with at least one value.
    """
    if len(groups) < 2:
        raise ValueError(
            f"need at least 2 documents for a decomposition, got {len(groups)}"
        )
    cleaned: dict[str, np.ndarray] = {}
    for doc_id, values in groups.items():
        arr = np.asarray(list(values), dtype=np.float64)
        if arr.size == 0:
            raise ValueError(f"document {doc_id!r} has no values")
        cleaned[doc_id] = arr

    everything = np.concatenate(list(cleaned.values()))
    grand_mean = everything.mean()
    within = 0.0
    between = 0.0
    for arr in cleaned.values():
        mean = arr.mean()
        within += float(((arr - mean) ** 2).sum())
        between += arr.size * float((mean - grand_mean) ** 2)
    total = within + between
    # Identical values leave only rounding residue; call that zero variance.
    eps = 1e-12 * max(1.0, float((everything**2).sum()))
    if total <= eps:
        return VarianceParts(0.0, 0.0, degenerate=True)
    return VarianceParts(within / total, between / total)


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleOutcome:
    """Everything measured for one evaluation sample."""

    sample_id: str
    page_id: str
    document_id: str
    category: str
    failure_class: str
    top1_iou: float
    best_selected_iou: float
    tokens_selected: int
    tokens_all_regions: int
    tokens_full_image: int
    retrieved_page_id: str | None = None
    top_region_id: str | None = None

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "page_id": self.page_id,
            "document_id": self.document_id,
            "category": self.category,
            "failure_class": self.failure_class,
            "top1_iou": self.top1_iou,
            "best_selected_iou": self.best_selected_iou,
            "tokens_selected": self.tokens_selected,
            "tokens_all_regions": self.tokens_all_regions,
            "tokens_full_image": self.tokens_full_image,
            "retrieved_page_id": self.retrieved_page_id,
            "top_region_id": self.top_region_id,
        }


@dataclass(frozen=True)
class GroupMetrics:
    """Aggregate metrics over one category (or the whole run)."""

    name: str
    n_scored: int
    n_missing: int
    mean_top1_iou: float
    mean_best_selected_iou: float
    hit_rates: dict[float, float]
    failure_counts: dict[str, int]
    partial_overlap_rate: float | None
    no_adequate_selection: int
    tokens_selected: int
    tokens_all_regions: int
    tokens_full_image: int
    savings_vs_all_regions: float | None
    savings_vs_full_image: float | None
    variance: VarianceParts | None

    def to_record(self) -> dict:
        return {
            "group": self.name,
            "n_scored": self.n_scored,
            "n_missing": self.n_missing,
            "mean_top1_iou": self.mean_top1_iou,
            "mean_best_selected_iou": self.mean_best_selected_iou,
            "hit_rates": {f"{tau:g}": rate for tau, rate in self.hit_rates.items()},
            "failure_counts": dict(self.failure_counts),
            "partial_overlap_rate": self.partial_overlap_rate,
            "no_adequate_selection": self.no_adequate_selection,
            "tokens_selected": self.tokens_selected,
            "tokens_all_regions": self.tokens_all_regions,
            "tokens_full_image": self.tokens_full_image,
            "savings_vs_all_regions": self.savings_vs_all_regions,
            "savings_vs_full_image": self.savings_vs_full_image,
            "variance_within": self.variance.within_fraction if self.variance else None,
            "variance_between": self.variance.between_fraction if self.variance else None,
            "variance_degenerate": self.variance.degenerate if self.variance else None,
        }


@dataclass(frozen=True)
class EvalReport:
    """Full evaluation output: per-category metrics plus raw outcomes."""

    mode: str
    taus: tuple[float, ...]
    config: ScoringConfig
    groups: dict[str, GroupMetrics]
    outcomes: tuple[SampleOutcome, ...]

    @property
    def overall(self) -> GroupMetrics:
        return self.groups[OVERALL]

    def to_records(self) -> list[dict]:
        base = {
            "mode": self.mode,
            "taus": list(self.taus),
            "config": config_record(self.config),
        }
        return [{**base, **group.to_record()} for group in self.groups.values()]

    def to_text(self) -> str:
        taus = list(self.taus)
        header = (
            ["group", "n", "miss", "mIoU", "selIoU"]
            + [f"hit@{tau:g}" for tau in taus]
            + ["ocr_ceil", "sel_err", "tok_sel", "tok_all", "tok_img",
               "save_ocr%", "save_img%", "var_within"]
        )
        rows = [header]
        for group in self.groups.values():
            rows.append(
                [
                    group.name,
                    str(group.n_scored),
                    str(group.n_missing),
                    f"{group.mean_top1_iou:.3f}",
                    f"{group.mean_best_selected_iou:.3f}",
                ]
                + [f"{group.hit_rates[tau]:.3f}" for tau in taus]
                + [
                    str(group.failure_counts.get(OCR_CEILING, 0)),
                    str(group.failure_counts.get(SELECTION_ERROR, 0)),
                    str(group.tokens_selected),
                    str(group.tokens_all_regions),
                    str(group.tokens_full_image),
                    _fmt_opt(group.savings_vs_all_regions),
                    _fmt_opt(group.savings_vs_full_image),
                    (
                        f"{group.variance.within_fraction:.3f}"
                        if group.variance and not group.variance.degenerate
                        else "n/a"
                    ),
                ]
            )
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        lines = [
            "  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row))
            for row in rows
        ]
        return "\n".join(lines)


def _fmt_opt(value: float | None) -> str:
    return f"{value:.1f}" if value is not None else "n/a"


def config_record(config: ScoringConfig) -> dict:
    return {
        "token_agg": config.token_agg,
        "strategy": config.strategy,
        "percentile": config.percentile,
        "min_overlap": config.min_overlap,
    }


def _evaluate_sample(
    sample: EvalSample,
    index: CorpusIndex,
    queries: Mapping[str, QueryEmbedding],
    config: ScoringConfig,
    mode: str,
    tokenizer: TokenizerFn | None,
    k_candidates: int,
) -> SampleOutcome:
    query = queries.get(sample.query_ref)
    if query is None:
        raise ValueError(
            f"sample {sample.sample_id!r} references unknown query "
            f"{sample.query_ref!r}"
        )
    if sample.page_id not in index.pages:
        return SampleOutcome(
            sample_id=sample.sample_id,
            page_id=sample.page_id,
            document_id=sample.document_id,
            category=sample.category,
            failure_class=MISSING_PAGE,
            top1_iou=0.0,
            best_selected_iou=0.0,
            tokens_selected=0,
            tokens_all_regions=0,
            tokens_full_image=0,
        )

    true_record = index.records[sample.page_id]
    if mode == "retrieval":
        top = retrieve(query, index, config, k_candidates=k_candidates, top_pages=1)[0]
        scored_page_id = top.page_id
        ranking = top.regions
    else:
        scored_page_id = sample.page_id
        embedding = index.pages[sample.page_id]
        matrix = similarity_matrix(query, embedding)
        vec = patch_scores(matrix, config.token_agg)
        ranking = score_regions(
            vec,
            true_record.regions,
            true_record.page_width,
            true_record.page_height,
            embedding.grid,
            config,
        )

    scored_record = index.records[scored_page_id]
    boxes_by_id = {r.region_id: r.bbox for r in scored_record.regions}
    ranked_with_boxes = [
        (entry, boxes_by_id[entry.region_id]) for entry in ranking.scores
    ]

    if scored_page_id == sample.page_id:
        top1, best_selected = sample_iou(ranked_with_boxes, sample.gt_bboxes)
    else:
        # Retrieved the wrong page: no spatial credit is possible.
        top1, best_selected = 0.0, 0.0
    failure = classify_failure(top1, true_record.regions, sample.gt_bboxes)

    selected_ids = set(ranking.selected_ids())
    tokens_selected = sum(
        text_tokens(r.text, tokenizer)
        for r in scored_record.regions
        if r.region_id in selected_ids
    )
    tokens_all = sum(text_tokens(r.text, tokenizer) for r in scored_record.regions)
    tokens_image = image_tokens(scored_record.page_width, scored_record.page_height)

    return SampleOutcome(
        sample_id=sample.sample_id,
        page_id=sample.page_id,
        document_id=sample.document_id,
        category=sample.category,
        failure_class=failure,
        top1_iou=top1,
        best_selected_iou=best_selected,
        tokens_selected=tokens_selected,
        tokens_all_regions=tokens_all,
        tokens_full_image=tokens_image,
        retrieved_page_id=scored_page_id,
        top_region_id=(
            ranking.scores[0].region_id if ranking.scores else None
        ),
    )


def _group_metrics(
    name: str, outcomes: Sequence[SampleOutcome], taus: Sequence[float]
) -> GroupMetrics:
    scored = [o for o in outcomes if o.failure_class != MISSING_PAGE]
    missing = len(outcomes) - len(scored)
    counts = {cls: 0 for cls in FAILURE_CLASSES}
    for outcome in outcomes:
        counts[outcome.failure_class] += 1

    if scored:
        ious = [o.top1_iou for o in scored]
        mean_top1 = float(np.mean(ious))
        mean_best = float(np.mean([o.best_selected_iou for o in scored]))
        rates = {tau: hit_rate(ious, tau) for tau in taus}
        failures = [o for o in scored if o.failure_class != HIT]
        partial = (
            hit_rate([o.top1_iou for o in failures], PARTIAL_IOU)
            if failures
            else None
        )
        no_adequate = sum(1 for o in failures if o.best_selected_iou < HIT_IOU)
        tokens_selected = sum(o.tokens_selected for o in scored)
        tokens_all = sum(o.tokens_all_regions for o in scored)
        tokens_image = sum(o.tokens_full_image for o in scored)
        savings_all = (
            token_savings(tokens_selected, tokens_all) if tokens_all > 0 else None
        )
        savings_image = (
            token_savings(tokens_selected, tokens_image)
            if tokens_image > 0
            else None
        )
        by_doc: dict[str, list[float]] = {}
        for outcome in scored:
            by_doc.setdefault(outcome.document_id, []).append(outcome.top1_iou)
        variance = (
            variance_decomposition(by_doc) if len(by_doc) >= 2 else None
        )
    else:
        mean_top1 = 0.0
        mean_best = 0.0
        rates = {tau: 0.0 for tau in taus}
        partial = None
        no_adequate = 0
        tokens_selected = tokens_all = tokens_image = 0
        savings_all = savings_image = None
        variance = None

    return GroupMetrics(
        name=name,
        n_scored=len(scored),
        n_missing=missing,
        mean_top1_iou=mean_top1,
        mean_best_selected_iou=mean_best,
        hit_rates=rates,
        failure_counts=counts,
        partial_overlap_rate=partial,
        no_adequate_selection=no_adequate,
        tokens_selected=tokens_selected,
        tokens_all_regions=tokens_all,
        tokens_full_image=tokens_image,
        savings_vs_all_regions=savings_all,
        savings_vs_full_image=savings_image,
        variance=variance,
    )


def run_evaluation(
    index: CorpusIndex,
    samples: Sequence[EvalSample],
    queries: Mapping[str, QueryEmbedding],
    config: ScoringConfig,
    *,
    mode: str = "localization",
    taus: Sequence[float] = DEFAULT_TAUS,
    tokenizer: TokenizerFn | None = None,
    k_candidates: int = DEFAULT_CANDIDATES,
    workers: int = 1,
) -> EvalReport:
    """Evaluates every sample and aggregates per category plus overall.

    ``localization`` scores each sample on its annotated page; ``retrieval``
    first retrieves the top page over the whole index and scores that, so
    picking the wrong page costs the sample its IoU.  Samples whose page is
    not in the index are counted as ``missing_page`` and excluded from all
    other metrics.  Results are deterministic and independent of ``workers``.
    """
    if not samples:
        raise ValueError("cannot evaluate zero samples")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    taus = tuple(taus)
    if not taus or any(not 0.0 <= tau <= 1.0 for tau in taus):
        raise ValueError(f"taus must be IoU thresholds in [0, 1], got {taus}")

    def job(sample: EvalSample) -> SampleOutcome:
        return _evaluate_sample(
            sample, index, queries, config, mode, tokenizer, k_candidates
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = tuple(pool.map(job, samples))
    else:
        outcomes = tuple(job(sample) for sample in samples)

    groups: dict[str, GroupMetrics] = {}
    for category in sorted({o.category for o in outcomes}):
        members = [o for o in outcomes if o.category == category]
        groups[category] = _group_metrics(category, members, taus)
    groups[OVERALL] = _group_metrics(OVERALL, outcomes, taus)

    return EvalReport(
        mode=mode,
        taus=taus,
        config=config,
        groups=groups,
        outcomes=outcomes,
    )


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationGrid:
    """Cartesian grid of scoring configurations to sweep."""

    percentiles: tuple[float, ...] = (ScoringConfig().percentile,)
    strategies: tuple[str, ...] = (ScoringConfig().strategy,)
    min_overlaps: tuple[float, ...] = (ScoringConfig().min_overlap,)
    token_aggs: tuple[str, ...] = (ScoringConfig().token_agg,)

    def __post_init__(self) -> None:
        for name in ("percentiles", "strategies", "min_overlaps", "token_aggs"):
            values = getattr(self, name)
            object.__setattr__(self, name, tuple(values))
            if not getattr(self, name):
                raise ValueError(f"ablation grid has no {name}")

    def configs(self) -> list[ScoringConfig]:
        """Grid order: percentile, then strategy, then overlap, then token_agg."""
        return [
            ScoringConfig(
                token_agg=token_agg,
                strategy=strategy,
                percentile=percentile,
                min_overlap=min_overlap,
            )
            for percentile in self.percentiles
            for strategy in self.strategies
            for min_overlap in self.min_overlaps
            for token_agg in self.token_aggs
        ]


@dataclass(frozen=True)
class AblationRow:
    config: ScoringConfig
    report: EvalReport


def run_ablation(
    index: CorpusIndex,
    samples: Sequence[EvalSample],
    queries: Mapping[str, QueryEmbedding],
    grid: AblationGrid,
    **eval_kwargs,
) -> list[AblationRow]:
    """Runs the evaluation once per grid configuration, in grid order."""
    rows = []
    for config in grid.configs():
        report = run_evaluation(index, samples, queries, config, **eval_kwargs)
        rows.append(AblationRow(config=config, report=report))
    return rows
