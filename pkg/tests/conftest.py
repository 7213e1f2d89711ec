"""Shared fixtures: an on-disk copy of the planted corpus."""

from dataclasses import dataclass
from pathlib import Path

import pytest

from regionrank.formats import (
    write_eval_samples,
    write_page_embedding,
    write_page_records,
    write_query_embedding,
)

from _synthetic import PlantedCorpus, planted_corpus


@dataclass
class DiskCorpus:
    corpus: PlantedCorpus
    embeddings_dir: Path
    regions_path: Path
    samples_path: Path
    queries_dir: Path
    query_path: Path


@pytest.fixture
def disk_corpus(tmp_path) -> DiskCorpus:
    corpus = planted_corpus()
    embeddings_dir = tmp_path / "embeddings"
    embeddings_dir.mkdir()
    for emb in corpus.embeddings:
        write_page_embedding(emb, embeddings_dir / f"{emb.page_id}.emb")
    regions_path = tmp_path / "regions.jsonl"
    write_page_records(corpus.records, regions_path)
    samples_path = tmp_path / "samples.jsonl"
    write_eval_samples(corpus.samples, samples_path)
    queries_dir = tmp_path / "queries"
    queries_dir.mkdir()
    query_path = queries_dir / "q_planted.emb"
    write_query_embedding(corpus.query, query_path)
    return DiskCorpus(
        corpus=corpus,
        embeddings_dir=embeddings_dir,
        regions_path=regions_path,
        samples_path=samples_path,
        queries_dir=queries_dir,
        query_path=query_path,
    )
