"""Data records and their on-disk formats.

Two kinds of artifacts move between tools:

* Embedding files (``.emb``): a small binary container for one page's patch
  embeddings or one query's token embeddings.  Layout, all integers
  little-endian u32:

      magic ``SNPE`` | version | id_len | id (UTF-8) | grid_side | n_rows
      | dim | n_rows * dim float32 rows (row-major)
      | [dim float32 pooled vector, page files only]

  ``grid_side`` is 0 for query files.  Page files must carry exactly
  ``grid_side ** 2`` rows plus a pooled vector equal to the row mean.

* JSON-lines records: one page's OCR regions per line (``regions.jsonl``)
  and one evaluation sample per line (``samples.jsonl``).  Unknown fields
  are ignored so files from newer writers still load.

Loaders are strict about corruption (bad magic, version, truncation, row
counts, NaN/Inf) and tolerant about benign drift: rows whose norms are off
by more than 1e-3 are renormalized with a logged warning.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .geometry import DEFAULT_GRID, BBox, PatchGrid

logger = logging.getLogger(__name__)

MAGIC = b"SNPE"
FORMAT_VERSION = 1

# Sanity caps so a corrupt header cannot demand absurd allocations.
_MAX_ID_BYTES = 4096
_MAX_GRID_SIDE = 4096
_MAX_ROWS = 1 << 22
_MAX_DIM = 1 << 16

POOLED_TOLERANCE = 1e-6
NORM_TOLERANCE = 1e-3


class EmbeddingFormatError(ValueError):
    """Raised when an embedding file is corrupt or violates the format."""


class RecordFormatError(ValueError):
    """Raised when a JSON-lines record file is malformed."""


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OcrRegion:
    """One OCR region on a page: an id, a page-space box, and its text."""

    region_id: str
    bbox: BBox
    text: str = ""

    def __post_init__(self) -> None:
        if not self.region_id:
            raise ValueError("region_id must be non-empty")


@dataclass(frozen=True)
class PageRecord:
    """OCR layout of one page.

    ``page_width`` and ``page_height`` are the page's pixel dimensions;
    region boxes are expressed in that coordinate system.
    """

    page_id: str
    document_id: str
    page_width: float
    page_height: float
    regions: tuple[OcrRegion, ...] = ()
    category: str | None = None

    def __post_init__(self) -> None:
        if not self.page_id:
            raise ValueError("page_id must be non-empty")
        if not self.document_id:
            raise ValueError("document_id must be non-empty")
        if self.page_width <= 0 or self.page_height <= 0:
            raise ValueError(
                f"page dimensions must be positive, got "
                f"{self.page_width}x{self.page_height}"
            )
        object.__setattr__(self, "regions", tuple(self.regions))
        seen: set[str] = set()
        for region in self.regions:
            if region.region_id in seen:
                raise ValueError(
                    f"duplicate region_id {region.region_id!r} on page "
                    f"{self.page_id!r}"
                )
            seen.add(region.region_id)


@dataclass(frozen=True)
class EvalSample:
    """One evaluation sample: a query against a known page with ground truth.

    ``gt_bboxes`` are ground-truth evidence boxes in page coordinates;
    ``query_ref`` names the query embedding to use.
    """

    sample_id: str
    page_id: str
    document_id: str
    category: str
    query_ref: str
    gt_bboxes: tuple[BBox, ...]
    question_text: str | None = None

    def __post_init__(self) -> None:
        for name in ("sample_id", "page_id", "document_id", "category", "query_ref"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        object.__setattr__(self, "gt_bboxes", tuple(self.gt_bboxes))
        if not self.gt_bboxes:
            raise ValueError(f"sample {self.sample_id!r} has no gt_bboxes")


# ---------------------------------------------------------------------------
# Embedding containers
# ---------------------------------------------------------------------------


def _coerce_matrix(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be a 2-d array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{what} must be non-empty, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains NaN or Inf")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class QueryEmbedding:
    """Token embeddings of one query, one row per kept token."""

    query_id: str
    vectors: np.ndarray

    def __post_init__(self) -> None:
        if not self.query_id:
            raise ValueError("query_id must be non-empty")
        object.__setattr__(
            self, "vectors", _coerce_matrix(self.vectors, "query vectors")
        )

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass(frozen=True)
class PageEmbedding:
    """Patch embeddings of one page plus their mean-pooled summary vector.

    Rows follow raster-scan patch order and must number exactly
    ``grid.patch_count``.  ``pooled`` must equal the row mean within 1e-6;
    use :meth:`from_patches` to get that for free.
    """

    page_id: str
    patch_vectors: np.ndarray
    pooled: np.ndarray
    grid: PatchGrid

    def __post_init__(self) -> None:
        if not self.page_id:
            raise ValueError("page_id must be non-empty")
        patches = _coerce_matrix(self.patch_vectors, "patch vectors")
        object.__setattr__(self, "patch_vectors", patches)
        if patches.shape[0] != self.grid.patch_count:
            raise ValueError(
                f"page {self.page_id!r} has {patches.shape[0]} patch rows, "
                f"grid expects {self.grid.patch_count}"
            )
        pooled = np.asarray(self.pooled, dtype=np.float32)
        if pooled.shape != (patches.shape[1],):
            raise ValueError(
                f"pooled vector shape {pooled.shape} does not match "
                f"dim {patches.shape[1]}"
            )
        if not np.isfinite(pooled).all():
            raise ValueError("pooled vector contains NaN or Inf")
        deviation = float(np.max(np.abs(pooled - patches.mean(axis=0))))
        if deviation > POOLED_TOLERANCE:
            raise ValueError(
                f"pooled vector deviates from patch mean by {deviation:.3g} "
                f"(max allowed {POOLED_TOLERANCE:g})"
            )
        object.__setattr__(self, "pooled", np.ascontiguousarray(pooled))

    @classmethod
    def from_patches(
        cls, page_id: str, patch_vectors, grid: PatchGrid
    ) -> "PageEmbedding":
        patches = _coerce_matrix(patch_vectors, "patch vectors")
        return cls(page_id, patches, patches.mean(axis=0), grid)

    @property
    def dim(self) -> int:
        return int(self.patch_vectors.shape[1])


# ---------------------------------------------------------------------------
# Embedding wire format
# ---------------------------------------------------------------------------


def _read_exact(handle: BinaryIO, count: int, path: Path, what: str) -> bytes:
    data = handle.read(count)
    if len(data) != count:
        raise EmbeddingFormatError(
            f"{path}: truncated file while reading {what} "
            f"(wanted {count} bytes, got {len(data)})"
        )
    return data


def _read_u32(handle: BinaryIO, path: Path, what: str) -> int:
    return struct.unpack("<I", _read_exact(handle, 4, path, what))[0]


def _pack_header(identifier: str, grid_side: int, n_rows: int, dim: int) -> bytes:
    id_bytes = identifier.encode("utf-8")
    if len(id_bytes) > _MAX_ID_BYTES:
        raise ValueError(f"identifier too long ({len(id_bytes)} bytes)")
    return b"".join(
        (
            MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            struct.pack("<I", len(id_bytes)),
            id_bytes,
            struct.pack("<III", grid_side, n_rows, dim),
        )
    )


def write_page_embedding(embedding: PageEmbedding, path: str | Path) -> None:
    """Writes one page embedding to ``path`` in the binary container format."""
    path = Path(path)
    rows = embedding.patch_vectors
    payload = b"".join(
        (
            _pack_header(
                embedding.page_id, embedding.grid.grid_side, rows.shape[0],
                rows.shape[1],
            ),
            rows.astype("<f4", copy=False).tobytes(order="C"),
            embedding.pooled.astype("<f4", copy=False).tobytes(),
        )
    )
    path.write_bytes(payload)


def write_query_embedding(embedding: QueryEmbedding, path: str | Path) -> None:
    """Writes one query embedding to ``path`` (grid_side stored as 0)."""
    path = Path(path)
    rows = embedding.vectors
    payload = _pack_header(embedding.query_id, 0, rows.shape[0], rows.shape[1])
    payload += rows.astype("<f4", copy=False).tobytes(order="C")
    path.write_bytes(payload)


def _read_container(path: Path) -> tuple[str, int, np.ndarray, np.ndarray | None]:
    """Parses one embedding file into (id, grid_side, rows, pooled-or-None)."""
    with path.open("rb") as handle:
        magic = _read_exact(handle, 4, path, "magic")
        if magic != MAGIC:
            raise EmbeddingFormatError(
                f"{path}: bad magic {magic!r}, expected {MAGIC!r}"
            )
        version = _read_u32(handle, path, "version")
        if version != FORMAT_VERSION:
            raise EmbeddingFormatError(
                f"{path}: unsupported format version {version}, "
                f"expected {FORMAT_VERSION}"
            )
        id_len = _read_u32(handle, path, "id length")
        if id_len == 0 or id_len > _MAX_ID_BYTES:
            raise EmbeddingFormatError(f"{path}: implausible id length {id_len}")
        try:
            identifier = _read_exact(handle, id_len, path, "identifier").decode(
                "utf-8"
            )
        except UnicodeDecodeError as exc:
            raise EmbeddingFormatError(f"{path}: identifier is not UTF-8") from exc
        grid_side = _read_u32(handle, path, "grid side")
        n_rows = _read_u32(handle, path, "row count")
        dim = _read_u32(handle, path, "dim")
        if grid_side > _MAX_GRID_SIDE:
            raise EmbeddingFormatError(
                f"{path}: implausible grid side {grid_side}"
            )
        if n_rows == 0 or n_rows > _MAX_ROWS:
            raise EmbeddingFormatError(f"{path}: implausible row count {n_rows}")
        if dim == 0 or dim > _MAX_DIM:
            raise EmbeddingFormatError(f"{path}: implausible dim {dim}")
        if grid_side > 0 and n_rows != grid_side * grid_side:
            raise EmbeddingFormatError(
                f"{path}: page file declares grid {grid_side} but carries "
                f"{n_rows} rows, expected {grid_side * grid_side}"
            )
        rows_bytes = _read_exact(handle, 4 * n_rows * dim, path, "embedding rows")
        rows = np.frombuffer(rows_bytes, dtype="<f4").reshape(n_rows, dim)
        pooled: np.ndarray | None = None
        if grid_side > 0:
            pooled_bytes = _read_exact(handle, 4 * dim, path, "pooled vector")
            pooled = np.frombuffer(pooled_bytes, dtype="<f4")
        trailing = handle.read(1)
        if trailing:
            raise EmbeddingFormatError(f"{path}: trailing bytes after payload")
    if not np.isfinite(rows).all():
        raise EmbeddingFormatError(f"{path}: embedding rows contain NaN or Inf")
    if pooled is not None and not np.isfinite(pooled).all():
        raise EmbeddingFormatError(f"{path}: pooled vector contains NaN or Inf")
    return identifier, grid_side, rows, pooled


def _renormalize_rows(rows: np.ndarray, path: Path) -> tuple[np.ndarray, bool]:
    """Renormalizes rows whose norms drift past tolerance.

    Returns the (possibly rewritten) rows and whether a rewrite happened.
    Zero rows are left alone; they cannot be normalized.
    """
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    zero = norms == 0.0
    if zero.any():
        logger.warning(
            "%s: %d zero-norm embedding rows left unnormalized",
            path, int(zero.sum()),
        )
    nonzero = ~zero
    if not nonzero.any():
        return rows, False
    deviation = float(np.max(np.abs(norms[nonzero] - 1.0)))
    if deviation <= NORM_TOLERANCE:
        return rows, False
    logger.warning(
        "%s: row norms deviate from 1 by up to %.3g, renormalizing",
        path, deviation,
    )
    fixed = np.array(rows, dtype=np.float32, copy=True)
    fixed[nonzero] = fixed[nonzero] / norms[nonzero, None].astype(np.float32)
    return fixed, True


def read_page_embedding(path: str | Path, expected_grid: PatchGrid | None = None) -> PageEmbedding:
    """Reads one page embedding file, validating structure and content.

    The stored pooled vector must match the mean of the stored rows within
    1e-6.  If rows need renormalization the pooled vector is recomputed from
    the fixed rows; otherwise the stored values pass through bit-exactly.

    Args:
        path: File to read.
        expected_grid: When given, the file's grid side and row count must
            match it (the input side is taken from ``expected_grid``).
            Otherwise a grid with the default input resolution is assumed.
    """
    path = Path(path)
    identifier, grid_side, rows, pooled = _read_container(path)
    if grid_side == 0:
        raise EmbeddingFormatError(
            f"{path}: grid side is 0, this is a query file not a page file"
        )
    if pooled is None:  # unreachable given grid_side > 0, kept for clarity
        raise EmbeddingFormatError(f"{path}: page file lacks pooled vector")
    if expected_grid is not None:
        if grid_side != expected_grid.grid_side:
            raise EmbeddingFormatError(
                f"{path}: grid side {grid_side} does not match expected "
                f"{expected_grid.grid_side}"
            )
        grid = expected_grid
    elif grid_side == DEFAULT_GRID.grid_side:
        grid = DEFAULT_GRID
    else:
        # The file stores only the grid side; assume the default patch size
        # when no grid context is supplied.
        grid = PatchGrid(grid_side, grid_side * DEFAULT_GRID.patch_side)

    deviation = float(np.max(np.abs(pooled - rows.mean(axis=0))))
    if deviation > POOLED_TOLERANCE:
        raise EmbeddingFormatError(
            f"{path}: pooled vector deviates from row mean by {deviation:.3g} "
            f"(max allowed {POOLED_TOLERANCE:g})"
        )
    rows, rewritten = _renormalize_rows(rows, path)
    if rewritten:
        pooled = rows.mean(axis=0)
    return PageEmbedding(identifier, rows, pooled, grid)


def read_query_embedding(path: str | Path) -> QueryEmbedding:
    """Reads one query embedding file."""
    path = Path(path)
    identifier, grid_side, rows, _pooled = _read_container(path)
    if grid_side != 0:
        raise EmbeddingFormatError(
            f"{path}: grid side is {grid_side}, this is a page file not a "
            f"query file"
        )
    rows, _ = _renormalize_rows(rows, path)
    return QueryEmbedding(identifier, rows)


def load_query_embeddings(path: str | Path) -> dict[str, QueryEmbedding]:
    """Loads query embeddings from one ``.emb`` file or a directory of them.

    Returns a mapping from query id to embedding.  Duplicate query ids are
    an error.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.emb"))
        if not files:
            raise EmbeddingFormatError(f"{path}: no .emb files found")
    else:
        files = [path]
    out: dict[str, QueryEmbedding] = {}
    for file in files:
        emb = read_query_embedding(file)
        if emb.query_id in out:
            raise EmbeddingFormatError(
                f"{file}: duplicate query id {emb.query_id!r}"
            )
        out[emb.query_id] = emb
    return out


# ---------------------------------------------------------------------------
# JSON-lines records
# ---------------------------------------------------------------------------


def _require(obj: Mapping, key: str, line_no: int, path: Path):
    if key not in obj:
        raise RecordFormatError(
            f"{path}:{line_no}: missing required field {key!r}"
        )
    return obj[key]


def _bbox_from_json(values, line_no: int, path: Path) -> BBox:
    try:
        return BBox.from_sequence(values)
    except (TypeError, ValueError) as exc:
        raise RecordFormatError(f"{path}:{line_no}: bad bbox: {exc}") from exc


def _iter_json_lines(path: Path):
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise RecordFormatError(
                    f"{path}:{line_no}: invalid JSON: {exc}"
                ) from exc
            if not isinstance(obj, dict):
                raise RecordFormatError(
                    f"{path}:{line_no}: expected a JSON object"
                )
            yield line_no, obj


def load_page_records(path: str | Path) -> dict[str, PageRecord]:
    """Loads ``regions.jsonl`` into a mapping from page id to record.

    One JSON object per line.  Required fields: ``page_id``, ``document_id``,
    ``page_width``, ``page_height``, ``regions`` (each region needs ``id``
    and ``bbox``; ``text`` defaults to empty).  ``category`` is optional and
    unknown fields are ignored.  Duplicate page ids are an error.
    """
    path = Path(path)
    out: dict[str, PageRecord] = {}
    for line_no, obj in _iter_json_lines(path):
        page_id = _require(obj, "page_id", line_no, path)
        regions_raw = _require(obj, "regions", line_no, path)
        if not isinstance(regions_raw, list):
            raise RecordFormatError(f"{path}:{line_no}: regions must be a list")
        regions = []
        for entry in regions_raw:
            if not isinstance(entry, dict):
                raise RecordFormatError(
                    f"{path}:{line_no}: region entries must be objects"
                )
            region_id = _require(entry, "id", line_no, path)
            bbox = _bbox_from_json(_require(entry, "bbox", line_no, path), line_no, path)
            regions.append(
                OcrRegion(str(region_id), bbox, str(entry.get("text", "")))
            )
        try:
            record = PageRecord(
                page_id=str(page_id),
                document_id=str(_require(obj, "document_id", line_no, path)),
                page_width=float(_require(obj, "page_width", line_no, path)),
                page_height=float(_require(obj, "page_height", line_no, path)),
                regions=tuple(regions),
                category=(
                    str(obj["category"]) if obj.get("category") is not None else None
                ),
            )
        except (TypeError, ValueError) as exc:
            raise RecordFormatError(f"{path}:{line_no}: {exc}") from exc
        if record.page_id in out:
            raise RecordFormatError(
                f"{path}:{line_no}: duplicate page_id {record.page_id!r}"
            )
        out[record.page_id] = record
    return out


def dump_page_record(record: PageRecord) -> str:
    """Serializes one page record to its JSON-lines form."""
    obj = {
        "page_id": record.page_id,
        "document_id": record.document_id,
        "category": record.category,
        "page_width": record.page_width,
        "page_height": record.page_height,
        "regions": [
            {
                "id": region.region_id,
                "bbox": list(region.bbox.as_tuple()),
                "text": region.text,
            }
            for region in record.regions
        ],
    }
    if record.category is None:
        del obj["category"]
    return json.dumps(obj, ensure_ascii=False)


def write_page_records(records: Iterable[PageRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(dump_page_record(record) + "\n")


def load_eval_samples(path: str | Path) -> list[EvalSample]:
    """Loads ``samples.jsonl`` preserving file order.

    Required fields: ``sample_id``, ``page_id``, ``document_id``,
    ``category``, ``query_ref``, ``gt_bboxes`` (non-empty list of 4-element
    boxes).  ``question_text`` is optional; unknown fields are ignored.
    Duplicate sample ids are an error.
    """
    path = Path(path)
    out: list[EvalSample] = []
    seen: set[str] = set()
    for line_no, obj in _iter_json_lines(path):
        gt_raw = _require(obj, "gt_bboxes", line_no, path)
        if not isinstance(gt_raw, list) or not gt_raw:
            raise RecordFormatError(
                f"{path}:{line_no}: gt_bboxes must be a non-empty list"
            )
        gt = tuple(_bbox_from_json(entry, line_no, path) for entry in gt_raw)
        try:
            sample = EvalSample(
                sample_id=str(_require(obj, "sample_id", line_no, path)),
                page_id=str(_require(obj, "page_id", line_no, path)),
                document_id=str(_require(obj, "document_id", line_no, path)),
                category=str(_require(obj, "category", line_no, path)),
                query_ref=str(_require(obj, "query_ref", line_no, path)),
                gt_bboxes=gt,
                question_text=(
                    str(obj["question_text"])
                    if obj.get("question_text") is not None
                    else None
                ),
            )
        except (TypeError, ValueError) as exc:
            raise RecordFormatError(f"{path}:{line_no}: {exc}") from exc
        if sample.sample_id in seen:
            raise RecordFormatError(
                f"{path}:{line_no}: duplicate sample_id {sample.sample_id!r}"
            )
        seen.add(sample.sample_id)
        out.append(sample)
    return out


def dump_eval_sample(sample: EvalSample) -> str:
    """Serializes one evaluation sample to its JSON-lines form."""
    obj = {
        "sample_id": sample.sample_id,
        "page_id": sample.page_id,
        "document_id": sample.document_id,
        "category": sample.category,
        "query_ref": sample.query_ref,
        "gt_bboxes": [list(box.as_tuple()) for box in sample.gt_bboxes],
    }
    if sample.question_text is not None:
        obj["question_text"] = sample.question_text
    return json.dumps(obj, ensure_ascii=False)


def write_eval_samples(samples: Iterable[EvalSample], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for sample in samples:
            handle.write(dump_eval_sample(sample) + "\n")
