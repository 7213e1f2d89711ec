"""Embedding backends.

``HashBackend`` derives deterministic pseudo-embeddings from file bytes and
token text via SHA-256 — no model, no randomness, byte-stable across runs —
so the export pipeline and its contract tests run hermetically.

``ColPaliBackend`` wraps a real vision-language retrieval model through
``transformers``; it is imported lazily and only exercised when a model is
actually requested (see the live test, gated behind ``REGIONRANK_LIVE_MODEL``).
"""

import hashlib
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .config import HASH_MODEL_ID, AdapterConfig, AdapterError

BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
SPECIAL_TOKENS = frozenset({BOS_TOKEN, EOS_TOKEN})


class EmbeddingBackend(Protocol):
    """What an export run needs from a model."""

    model_id: str

    def embed_images(self, paths: Sequence[Path]) -> list[np.ndarray]:
        """One (n_patches, dim) float array per image, rows unit-norm."""
        ...

    def embed_query(self, text: str) -> tuple[list[str], np.ndarray]:
        """Token strings (special tokens included) and their (n, dim) rows."""
        ...


def _expand_unit_vector(seed: bytes, dim: int) -> np.ndarray:
    """Expands a seed into a deterministic unit vector of length ``dim``."""
    need = dim * 4
    blocks = []
    counter = 0
    while len(blocks) * 32 < need:
        blocks.append(
            hashlib.sha256(seed + counter.to_bytes(4, "little")).digest()
        )
        counter += 1
    raw = b"".join(blocks)[:need]
    ints = np.frombuffer(raw, dtype="<u4")
    vec = ints.astype(np.float64) / float(2**32) * 2.0 - 1.0
    norm = float(np.linalg.norm(vec))
    if norm < 1e-9:
        vec = np.zeros(dim, dtype=np.float64)
        vec[0] = 1.0
        norm = 1.0
    return vec / norm


class HashBackend:
    """Deterministic stand-in model: content-addressed unit vectors."""

    def __init__(
        self,
        n_patches: int,
        dim: int,
        model_id: str = HASH_MODEL_ID,
    ) -> None:
        if n_patches < 1 or dim < 1:
            raise AdapterError("n_patches and dim must be >= 1")
        self.n_patches = n_patches
        self.dim = dim
        self.model_id = model_id

    def embed_images(self, paths: Sequence[Path]) -> list[np.ndarray]:
        out = []
        for path in paths:
            base = hashlib.sha256(Path(path).read_bytes()).digest()
            rows = np.stack(
                [
                    _expand_unit_vector(
                        base + b"patch" + k.to_bytes(4, "little"), self.dim
                    )
                    for k in range(self.n_patches)
                ]
            )
            out.append(rows)
        return out

    def embed_query(self, text: str) -> tuple[list[str], np.ndarray]:
        tokens = [BOS_TOKEN, *text.split(), EOS_TOKEN]
        rows = np.stack(
            [
                _expand_unit_vector(
                    token.encode("utf-8") + b"@" + position.to_bytes(4, "little"),
                    self.dim,
                )
                for position, token in enumerate(tokens)
            ]
        )
        return tokens, rows


class ColPaliBackend:
    """Real model backend via ``transformers`` (optional extra ``live``).

    Loads lazily so the package imports without torch installed; inference
    runs in eval mode under ``no_grad`` so repeated exports are stable.
    """

    def __init__(
        self,
        model_id: str,
        device: str = "cpu",
        batch_size: int = 4,
    ) -> None:
        try:
            import torch
            from transformers import ColPaliForRetrieval, ColPaliProcessor
        except ImportError as exc:  # pragma: no cover - needs optional extra
            raise AdapterError(
                "model backend requires the 'live' extra "
                "(pip install regionrank-adapter[live])"
            ) from exc
        self._torch = torch
        self.model_id = model_id
        self.device = device
        self.batch_size = batch_size
        self.processor = ColPaliProcessor.from_pretrained(model_id)
        self.model = (
            ColPaliForRetrieval.from_pretrained(model_id).to(device).eval()
        )

    def embed_images(self, paths: Sequence[Path]) -> list[np.ndarray]:
        from PIL import Image

        out: list[np.ndarray] = []
        for start in range(0, len(paths), self.batch_size):
            chunk = paths[start : start + self.batch_size]
            images = [Image.open(p).convert("RGB") for p in chunk]
            batch = self.processor(images=images, return_tensors="pt").to(
                self.device
            )
            with self._torch.no_grad():
                embeddings = self.model(**batch).embeddings
            out.extend(
                embeddings[i].float().cpu().numpy() for i in range(len(chunk))
            )
        return out

    def embed_query(self, text: str) -> tuple[list[str], np.ndarray]:
        batch = self.processor(text=[text], return_tensors="pt").to(self.device)
        with self._torch.no_grad():
            embeddings = self.model(**batch).embeddings
        tokens = self.processor.tokenizer.convert_ids_to_tokens(
            batch["input_ids"][0]
        )
        return list(tokens), embeddings[0].float().cpu().numpy()


def make_backend(config: AdapterConfig) -> EmbeddingBackend:
    """Default backend for a config: hash stand-in unless a model is named."""
    if config.model_id == HASH_MODEL_ID:
        return HashBackend(config.patch_count, config.dim, config.model_id)
    return ColPaliBackend(
        config.model_id, device=config.device, batch_size=config.batch_size
    )
