"""Export operations: page images and query strings to wire-format files.

Both operations validate the backend's output against the declared grid and
dimension before any file is written, normalize rows defensively, and record
what was exported (model id, grid, dimension, token-filtering policy, page
pixel sizes, token counts) in ``manifest.json`` next to the ``.emb`` files.
"""

import json
import logging
import re
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .backends import SPECIAL_TOKENS, EmbeddingBackend, make_backend
from .config import AdapterConfig, AdapterError
from .wire import atomic_write_bytes, page_payload, query_payload

logger = logging.getLogger("regionrank_adapter.export")

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "regionrank-adapter/1"

_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")

_CONFIG_KEYS = (
    "model_id",
    "grid_side",
    "input_side",
    "dim",
    "include_special_tokens",
)


def _check_id(kind: str, identifier: str) -> None:
    if not _SAFE_ID.match(identifier):
        raise AdapterError(
            f"{kind} {identifier!r} is not filesystem-safe "
            f"(allowed: letters, digits, '.', '_', '-')"
        )


def _normalized_rows(identifier: str, rows: np.ndarray) -> np.ndarray:
    """Unit-normalizes rows in float64; zero rows are a backend bug."""
    rows = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(rows).all():
        raise AdapterError(f"{identifier}: backend produced NaN or Inf")
    norms = np.linalg.norm(rows, axis=1)
    if (norms < 1e-9).any():
        raise AdapterError(f"{identifier}: backend produced a zero vector")
    return rows / norms[:, None]


def _load_manifest(config: AdapterConfig) -> dict:
    path = config.output_dir / MANIFEST_NAME
    if not path.exists():
        return {
            "format": MANIFEST_FORMAT,
            "model_id": config.model_id,
            "grid_side": config.grid_side,
            "input_side": config.input_side,
            "dim": config.dim,
            "include_special_tokens": config.include_special_tokens,
            "pages": {},
            "queries": {},
        }
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise AdapterError(
            f"{path}: unknown manifest format {manifest.get('format')!r}"
        )
    current = {key: getattr(config, key) for key in _CONFIG_KEYS}
    existing = {key: manifest.get(key) for key in _CONFIG_KEYS}
    if existing != current:
        raise AdapterError(
            f"{path}: existing exports used {existing}, refusing to mix "
            f"with {current}; use a fresh output directory"
        )
    manifest.setdefault("pages", {})
    manifest.setdefault("queries", {})
    return manifest


def _save_manifest(config: AdapterConfig, manifest: dict) -> None:
    payload = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(
        config.output_dir / MANIFEST_NAME, payload.encode("utf-8")
    )


def export_pages(
    images: Sequence[str | Path],
    config: AdapterConfig,
    backend: EmbeddingBackend | None = None,
) -> list[Path]:
    """Embeds page images and writes one ``<stem>.emb`` per image.

    The image file stem becomes the page id.  Aborts before writing anything
    if the backend's patch count or vector width disagrees with the declared
    ``grid_side``/``dim``, or if any page id is unusable.
    """
    if not images:
        raise AdapterError("no images to export")
    backend = backend or make_backend(config)
    paths = [Path(p) for p in images]

    page_ids = []
    sizes = []
    for path in paths:
        if not path.is_file():
            raise AdapterError(f"image not found: {path}")
        _check_id("page id", path.stem)
        page_ids.append(path.stem)
        with Image.open(path) as img:
            sizes.append((int(img.width), int(img.height)))
    if len(set(page_ids)) != len(page_ids):
        raise AdapterError("duplicate page ids (image stems) in export set")

    prepared: list[tuple[str, np.ndarray, np.ndarray]] = []
    for start in range(0, len(paths), config.batch_size):
        chunk = paths[start : start + config.batch_size]
        arrays = backend.embed_images(chunk)
        if len(arrays) != len(chunk):
            raise AdapterError(
                f"backend returned {len(arrays)} embeddings "
                f"for {len(chunk)} images"
            )
        for path, rows in zip(chunk, arrays):
            rows = np.asarray(rows)
            if rows.ndim != 2 or rows.shape != (config.patch_count, config.dim):
                raise AdapterError(
                    f"{path.stem}: backend produced shape {rows.shape}, "
                    f"declared grid_side={config.grid_side} dim={config.dim} "
                    f"requires ({config.patch_count}, {config.dim}); "
                    "nothing was written"
                )
            rows32 = np.ascontiguousarray(
                _normalized_rows(path.stem, rows), dtype=np.float32
            )
            pooled = rows32.mean(axis=0)
            prepared.append((path.stem, rows32, pooled))

    config.output_dir.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(config)
    written = []
    for (page_id, rows32, pooled), (width, height) in zip(prepared, sizes):
        out_path = config.output_dir / f"{page_id}.emb"
        atomic_write_bytes(
            out_path, page_payload(page_id, rows32, pooled, config.grid_side)
        )
        manifest["pages"][page_id] = {
            "file": out_path.name,
            "width": width,
            "height": height,
        }
        written.append(out_path)
        logger.info("exported page %s (%dx%d)", page_id, width, height)
    _save_manifest(config, manifest)
    return written


def export_queries(
    queries: Mapping[str, str],
    config: AdapterConfig,
    backend: EmbeddingBackend | None = None,
) -> list[Path]:
    """Embeds query strings and writes one ``<query_id>.emb`` each.

    Applies the configured special-token policy: with
    ``include_special_tokens=False``, marker tokens are dropped and only the
    remaining rows are written, so the stored row count always equals the
    kept token count.  Empty or whitespace-only query text is an error.
    """
    if not queries:
        raise AdapterError("no queries to export")
    backend = backend or make_backend(config)

    prepared: list[tuple[str, np.ndarray, int, int]] = []
    for query_id, text in queries.items():
        _check_id("query id", query_id)
        if not text or not text.strip():
            raise AdapterError(f"query {query_id!r}: empty query text")
        tokens, rows = backend.embed_query(text)
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[0] != len(tokens):
            raise AdapterError(
                f"query {query_id!r}: backend returned {rows.shape} "
                f"for {len(tokens)} tokens"
            )
        if rows.shape[1] != config.dim:
            raise AdapterError(
                f"query {query_id!r}: backend produced dim {rows.shape[1]}, "
                f"declared dim is {config.dim}; nothing was written"
            )
        if not config.include_special_tokens:
            kept = [
                i for i, token in enumerate(tokens)
                if token not in SPECIAL_TOKENS
            ]
            if not kept:
                raise AdapterError(
                    f"query {query_id!r}: no tokens left after dropping "
                    "special tokens"
                )
            rows = rows[kept]
        rows32 = np.ascontiguousarray(
            _normalized_rows(query_id, rows), dtype=np.float32
        )
        prepared.append((query_id, rows32, len(tokens), rows32.shape[0]))

    config.output_dir.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(config)
    written = []
    for query_id, rows32, total, kept_count in prepared:
        out_path = config.output_dir / f"{query_id}.emb"
        atomic_write_bytes(out_path, query_payload(query_id, rows32))
        manifest["queries"][query_id] = {
            "file": out_path.name,
            "tokens_total": total,
            "tokens_kept": kept_count,
        }
        written.append(out_path)
        logger.info("exported query %s (%d/%d tokens)", query_id,
                    kept_count, total)
    _save_manifest(config, manifest)
    return written
