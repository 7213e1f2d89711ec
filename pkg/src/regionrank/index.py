"""Two-stage corpus index: pooled-vector shortlist, late-interaction rerank.

Stage 1 scores every page with a single cosine between the query's mean
token vector and the page's mean-pooled patch vector, keeping the top K
candidates.  Stage 2 runs the full token-by-patch similarity and region
ranking on those candidates only.  With K equal to the corpus size the final
page order matches exhaustive late-interaction scoring.
"""

from __future__ import annotations

import json
import logging
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .formats import (
    PageEmbedding,
    PageRecord,
    QueryEmbedding,
    load_page_records,
    read_page_embedding,
    write_page_embedding,
    write_page_records,
)
from .geometry import PatchGrid
from .scoring import (
    RegionRanking,
    ScoringConfig,
    page_score,
    patch_scores,
    score_regions,
    similarity_matrix,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PAGES_DIRNAME = "pages"
REGIONS_FILENAME = "regions.jsonl"
INDEX_FORMAT_VERSION = 1

# Stage-1 shortlist size; with ~1k patch vectors per page, reranking 100
# candidates is roughly a 100x saving over exhaustive scoring at 10k pages.
DEFAULT_CANDIDATES = 100

_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass(frozen=True)
class RetrievalResult:
    """One reranked page: its late-interaction score and region ranking."""

    page_id: str
    page_score: float
    stage1_rank: int
    regions: RegionRanking


@dataclass
class CorpusIndex:
    """In-memory index over one corpus of page embeddings and OCR records.

    ``page_ids`` fixes the page order; ``pooled_matrix`` stacks each page's
    pooled vector in that order for stage-1 scoring.
    """

    grid: PatchGrid
    dim: int
    page_ids: tuple[str, ...]
    pages: dict[str, PageEmbedding]
    records: dict[str, PageRecord]
    pooled_matrix: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.page_ids)

    @classmethod
    def from_pages(
        cls,
        embeddings: Sequence[PageEmbedding],
        records: Iterable[PageRecord] = (),
    ) -> "CorpusIndex":
        """Builds an index from page embeddings and OCR page records.

        All pages must share one grid and embedding dimension.  A record
        whose page has no embedding is dropped with a warning; a page with
        no record gets an empty placeholder so it can still be retrieved
        (its region list is empty and its nominal size is the model input).
        """
        if not embeddings:
            raise ValueError("cannot build an index from zero pages")
        grid = embeddings[0].grid
        dim = embeddings[0].dim
        pages: dict[str, PageEmbedding] = {}
        for emb in embeddings:
            if emb.grid != grid:
                raise ValueError(
                    f"page {emb.page_id!r} uses grid {emb.grid}, "
                    f"index was started with {grid}"
                )
            if emb.dim != dim:
                raise ValueError(
                    f"page {emb.page_id!r} has dim {emb.dim}, "
                    f"index was started with dim {dim}"
                )
            if emb.page_id in pages:
                raise ValueError(f"duplicate page_id {emb.page_id!r}")
            pages[emb.page_id] = emb

        by_page: dict[str, PageRecord] = {}
        for record in records:
            if record.page_id not in pages:
                logger.warning(
                    "region record for unknown page %r dropped", record.page_id
                )
                continue
            if record.page_id in by_page:
                raise ValueError(
                    f"duplicate page record for page {record.page_id!r}"
                )
            by_page[record.page_id] = record
        for page_id in pages:
            if page_id not in by_page:
                by_page[page_id] = PageRecord(
                    page_id=page_id,
                    document_id=page_id,
                    page_width=float(grid.input_side),
                    page_height=float(grid.input_side),
                    regions=(),
                )

        page_ids = tuple(emb.page_id for emb in embeddings)
        pooled = np.stack([pages[pid].pooled for pid in page_ids])
        return cls(
            grid=grid,
            dim=dim,
            page_ids=page_ids,
            pages=pages,
            records={pid: by_page[pid] for pid in page_ids},
            pooled_matrix=pooled,
        )


def pooled_query_vector(query: QueryEmbedding) -> np.ndarray:
    """Mean of the query's token vectors, renormalized to unit length.

    An all-zero mean (tokens cancelling out) is returned as-is and scores
    zero against every page.
    """
    mean = query.vectors.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        return mean
    return mean / norm


def stage1_candidates(
    query: QueryEmbedding, index: CorpusIndex, k: int
) -> list[str]:
    """Top-k page ids by pooled-vector cosine, ties by index page order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise ValueError("index is empty")
    if query.dim != index.dim:
        raise ValueError(
            f"query dim {query.dim} does not match index dim {index.dim}"
        )
    qvec = pooled_query_vector(query)
    norms = np.linalg.norm(index.pooled_matrix, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    sims = (index.pooled_matrix @ qvec) / safe
    order = np.argsort(-sims, kind="stable")
    return [index.page_ids[i] for i in order[:k]]


def stage2_rerank(
    query: QueryEmbedding,
    index: CorpusIndex,
    candidate_ids: Sequence[str],
    config: ScoringConfig,
) -> list[RetrievalResult]:
    """Scores candidates with full late interaction and ranks their regions.

    Returns results sorted by descending page score; ties keep candidate
    (stage-1) order.  Candidates missing from the index are skipped with a
    warning so a stale shortlist cannot abort a whole run.
    """
    results: list[RetrievalResult] = []
    for stage1_rank, page_id in enumerate(candidate_ids, start=1):
        embedding = index.pages.get(page_id)
        if embedding is None:
            logger.warning("candidate page %r not in index, skipped", page_id)
            continue
        record = index.records[page_id]
        matrix = similarity_matrix(query, embedding)
        vec = patch_scores(matrix, config.token_agg)
        ranking = score_regions(
            vec,
            record.regions,
            record.page_width,
            record.page_height,
            embedding.grid,
            config,
        )
        results.append(
            RetrievalResult(
                page_id=page_id,
                page_score=page_score(matrix),
                stage1_rank=stage1_rank,
                regions=ranking,
            )
        )
    results.sort(key=lambda r: r.page_score, reverse=True)
    return results


def retrieve(
    query: QueryEmbedding,
    index: CorpusIndex,
    config: ScoringConfig,
    k_candidates: int = DEFAULT_CANDIDATES,
    top_pages: int = 1,
) -> list[RetrievalResult]:
    """Two-stage retrieval: shortlist by pooled cosine, rerank, return top pages."""
    if top_pages < 1:
        raise ValueError(f"top_pages must be >= 1, got {top_pages}")
    if k_candidates < top_pages:
        raise ValueError(
            f"k_candidates ({k_candidates}) must be >= top_pages ({top_pages})"
        )
    candidates = stage1_candidates(query, index, k_candidates)
    return stage2_rerank(query, index, candidates, config)[:top_pages]


def validate_page_id(page_id: str) -> None:
    """Rejects page ids that cannot double as file names."""
    if not _SAFE_ID.match(page_id):
        raise ValueError(
            f"page_id {page_id!r} is not filesystem-safe "
            f"(allowed: letters, digits, '.', '_', '-')"
        )


def build_index(
    embeddings: Sequence[PageEmbedding],
    records: Iterable[PageRecord],
    out_dir: str | Path,
) -> CorpusIndex:
    """Builds an index and persists it under ``out_dir``.

    Layout: ``manifest.json`` with the grid and corpus shape, one
    ``pages/<page_id>.emb`` per page, and a normalized ``regions.jsonl``.
    """
    index = CorpusIndex.from_pages(embeddings, records)
    for page_id in index.page_ids:
        validate_page_id(page_id)

    out_dir = Path(out_dir)
    pages_dir = out_dir / PAGES_DIRNAME
    if pages_dir.exists():
        shutil.rmtree(pages_dir)
    pages_dir.mkdir(parents=True)
    for page_id in index.page_ids:
        write_page_embedding(index.pages[page_id], pages_dir / f"{page_id}.emb")
    write_page_records(
        (index.records[pid] for pid in index.page_ids),
        out_dir / REGIONS_FILENAME,
    )
    manifest = {
        "format_version": INDEX_FORMAT_VERSION,
        "grid_side": index.grid.grid_side,
        "input_side": index.grid.input_side,
        "dim": index.dim,
        "page_count": len(index),
        "page_ids": list(index.page_ids),
        "region_count": sum(
            len(index.records[pid].regions) for pid in index.page_ids
        ),
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    return index


def load_index(index_dir: str | Path) -> CorpusIndex:
    """Loads an index directory produced by :func:`build_index`."""
    index_dir = Path(index_dir)
    manifest_path = index_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ValueError(f"{index_dir} is not an index directory (no manifest)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != INDEX_FORMAT_VERSION:
        raise ValueError(
            f"{manifest_path}: unsupported index format version {version!r}, "
            f"expected {INDEX_FORMAT_VERSION}"
        )
    grid = PatchGrid(int(manifest["grid_side"]), int(manifest["input_side"]))
    page_ids = [str(pid) for pid in manifest["page_ids"]]
    pages_dir = index_dir / PAGES_DIRNAME
    embeddings = []
    for page_id in page_ids:
        path = pages_dir / f"{page_id}.emb"
        if not path.is_file():
            raise ValueError(f"index is missing embedding file {path}")
        embeddings.append(read_page_embedding(path, expected_grid=grid))
    records = load_page_records(index_dir / REGIONS_FILENAME)
    index = CorpusIndex.from_pages(embeddings, records.values())
    if index.dim != int(manifest["dim"]):
        raise ValueError(
            f"manifest declares dim {manifest['dim']} but pages carry "
            f"dim {index.dim}"
        )
    return index
