"""Writer for the embedding container format the engine consumes.

Layout, all integers little-endian u32, all floats little-endian f32:

    magic "SNPE" | version=1 | id_len | id (UTF-8)
    | grid_side (0 for queries) | n_rows | dim
    | n_rows x dim float32 rows (row-major)
    | dim float32 pooled vector (page files only)

This module is deliberately standalone: the adapter writes the format, the
engine reads it, and their only coupling is these bytes.
"""

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"SNPE"
FORMAT_VERSION = 1


def _pack_header(identifier: str, grid_side: int, n_rows: int, dim: int) -> bytes:
    id_bytes = identifier.encode("utf-8")
    return b"".join(
        (
            MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            struct.pack("<I", len(id_bytes)),
            id_bytes,
            struct.pack("<III", grid_side, n_rows, dim),
        )
    )


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Writes ``payload`` to ``path`` via a temp file and atomic rename."""
    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(
        dir=path.parent, prefix=f".{path.name}.", suffix=".tmp"
    )
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except FileNotFoundError:
            pass
        raise


def page_payload(
    page_id: str, rows: np.ndarray, pooled: np.ndarray, grid_side: int
) -> bytes:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    pooled = np.ascontiguousarray(pooled, dtype="<f4")
    return b"".join(
        (
            _pack_header(page_id, grid_side, rows.shape[0], rows.shape[1]),
            rows.tobytes(order="C"),
            pooled.tobytes(),
        )
    )


def query_payload(query_id: str, rows: np.ndarray) -> bytes:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    header = _pack_header(query_id, 0, rows.shape[0], rows.shape[1])
    return header + rows.tobytes(order="C")


def write_page_file(
    path: Path, page_id: str, rows: np.ndarray, pooled: np.ndarray, grid_side: int
) -> None:
    atomic_write_bytes(path, page_payload(page_id, rows, pooled, grid_side))


def write_query_file(path: Path, query_id: str, rows: np.ndarray) -> None:
    atomic_write_bytes(path, query_payload(query_id, rows))
