"""Command-line interface.

Subcommands:

* ``index``   build an index directory from page embeddings and OCR records
* ``query``   retrieve pages and regions for one query embedding
* ``eval``    run the evaluation harness over a sample file
* ``ablate``  sweep scoring configurations over the same samples
* ``heatmap`` export one page's patch-score grid as CSV and PGM

Option values resolve as: command-line flag, then config file entry, then
built-in default.  The effective configuration is echoed into every output
so results stay self-describing.  Exit codes: 0 on success, 1 on invalid
input or arguments, 2 on unexpected runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation, formats, index as index_mod, scoring
from .geometry import scale_bbox

logger = logging.getLogger(__name__)

DEFAULT_TOP_PAGES = 5

CONFIG_KEYS = {
    "token_agg": str,
    "strategy": str,
    "percentile": float,
    "min_overlap": float,
    "k_candidates": int,
    "top_pages": int,
    "workers": int,
}


class CliError(ValueError):
    """Invalid input or arguments; maps to exit code 1."""


@dataclass(frozen=True)
class RunConfig:
    """Effective settings of one CLI invocation."""

    token_agg: str = "max"
    strategy: str = "max"
    percentile: float = scoring.DEFAULT_PERCENTILE
    min_overlap: float = scoring.DEFAULT_MIN_OVERLAP
    k_candidates: int = index_mod.DEFAULT_CANDIDATES
    top_pages: int = DEFAULT_TOP_PAGES
    workers: int = 0

    def __post_init__(self) -> None:
        self.scoring()  # validates the scoring fields
        if self.k_candidates < 1:
            raise CliError(f"k_candidates must be >= 1, got {self.k_candidates}")
        if self.top_pages < 1:
            raise CliError(f"top_pages must be >= 1, got {self.top_pages}")
        if self.k_candidates < self.top_pages:
            raise CliError(
                f"k_candidates ({self.k_candidates}) must be >= top_pages "
                f"({self.top_pages})"
            )
        if self.workers < 0:
            raise CliError(f"workers must be >= 0, got {self.workers}")

    def scoring(self) -> scoring.ScoringConfig:
        try:
            return scoring.ScoringConfig(
                token_agg=self.token_agg,
                strategy=self.strategy,
                percentile=self.percentile,
                min_overlap=self.min_overlap,
            )
        except ValueError as exc:
            raise CliError(str(exc)) from exc

    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def to_record(self) -> dict:
        return {
            "token_agg": self.token_agg,
            "strategy": self.strategy,
            "percentile": self.percentile,
            "min_overlap": self.min_overlap,
            "k_candidates": self.k_candidates,
            "top_pages": self.top_pages,
            "workers": self.workers,
        }


def parse_config_file(path: Path) -> dict:
    """Parses ``key = value`` lines; ``#`` starts a comment."""
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    out = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{line_no}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise CliError(
                f"{path}:{line_no}: unknown config key {key!r} "
                f"(known: {', '.join(sorted(CONFIG_KEYS))})"
            )
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise CliError(f"{path}:{line_no}: bad value for {key!r}: {exc}") from exc
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merges defaults, config file, and explicit flags, in that order."""
    settings: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        settings.update(parse_config_file(Path(config_path)))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    try:
        return RunConfig(**settings)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file with key = value lines")
    parser.add_argument(
        "--token-agg", dest="token_agg",
        choices=list(scoring.TOKEN_AGGREGATIONS),
        help="patch score over query tokens (default max)",
    )
    parser.add_argument(
        "--strategy", choices=list(scoring.STRATEGIES),
        help="region aggregation over covered patches (default max)",
    )
    parser.add_argument(
        "--percentile", type=float,
        help="selection percentile over region scores (default 50)",
    )
    parser.add_argument(
        "--min-overlap", dest="min_overlap", type=float,
        help="minimum patch overlap fraction (default 0.25)",
    )
    parser.add_argument(
        "--k-candidates", dest="k_candidates", type=int,
        help="stage-1 shortlist size (default 100)",
    )
    parser.add_argument(
        "--top-pages", dest="top_pages", type=int,
        help="pages returned after reranking (default 5)",
    )
    parser.add_argument(
        "--workers", type=int,
        help="evaluation worker threads (default: all cores)",
    )


def _check_out_dir(out_dir: Path, index_dir: Path | None) -> Path:
    if index_dir is not None:
        out_resolved = out_dir.resolve()
        index_resolved = index_dir.resolve()
        if out_resolved == index_resolved or index_resolved in out_resolved.parents:
            raise CliError(
                f"output directory {out_dir} must not be the index directory "
                f"or live inside it"
            )
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _load_index(path: str) -> index_mod.CorpusIndex:
    try:
        return index_mod.load_index(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load index: {exc}") from exc


def _load_queries(path: str) -> dict[str, formats.QueryEmbedding]:
    try:
        return formats.load_query_embeddings(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load queries: {exc}") from exc


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_index(args: argparse.Namespace) -> int:
    emb_dir = Path(args.embeddings)
    if not emb_dir.is_dir():
        raise CliError(f"embeddings directory not found: {emb_dir}")
    files = sorted(emb_dir.glob("*.emb"))
    if not files:
        raise CliError(f"no .emb files under {emb_dir}")
    try:
        embeddings = [formats.read_page_embedding(path) for path in files]
        records = formats.load_page_records(Path(args.regions))
        built = index_mod.build_index(embeddings, records.values(), Path(args.out))
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    region_count = sum(len(built.records[pid].regions) for pid in built.page_ids)
    print(
        f"indexed {len(built)} pages ({region_count} regions), "
        f"grid {built.grid.grid_side}x{built.grid.grid_side}, "
        f"dim {built.dim} -> {args.out}"
    )
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    corpus = _load_index(args.index)
    try:
        query = formats.read_query_embedding(Path(args.query))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load query: {exc}") from exc
    try:
        results = index_mod.retrieve(
            query,
            corpus,
            config.scoring(),
            k_candidates=min(config.k_candidates, len(corpus)),
            top_pages=min(config.top_pages, len(corpus)),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    page_payloads = []
    for result in results:
        regions_by_id = {
            r.region_id: r for r in corpus.records[result.page_id].regions
        }
        page_payloads.append(
            {
                "page_id": result.page_id,
                "page_score": result.page_score,
                "stage1_rank": result.stage1_rank,
                "regions": [
                    {
                        "region_id": entry.region_id,
                        "rank": entry.rank,
                        "score": entry.score,
                        "selected": entry.selected,
                        "bbox": list(regions_by_id[entry.region_id].bbox.as_tuple()),
                        "text": regions_by_id[entry.region_id].text,
                    }
                    for entry in result.regions.scores
                ],
                "skipped_regions": list(result.regions.skipped),
            }
        )
    payload = {
        "config": config.to_record(),
        "query_id": query.query_id,
        "results": page_payloads,
    }
    if args.out:
        out_dir = _check_out_dir(Path(args.out), Path(args.index))
        _write_json(out_dir / f"query_{query.query_id}.json", payload)

    for result in results:
        print(f"page {result.page_id}  score={result.page_score:.4f}")
        for entry in result.regions.scores:
            marker = "*" if entry.selected else " "
            print(
                f"  {marker} #{entry.rank:<3d} {entry.region_id:<24s} "
                f"{entry.score:.4f}"
            )
    return 0


def _parse_taus(raw: str) -> tuple[float, ...]:
    try:
        taus = tuple(float(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise CliError(f"bad --taus value {raw!r}: {exc}") from exc
    if not taus:
        raise CliError("--taus must name at least one threshold")
    return taus


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    corpus = _load_index(args.index)
    queries = _load_queries(args.queries)
    try:
        samples = formats.load_eval_samples(Path(args.samples))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load samples: {exc}") from exc
    taus = _parse_taus(args.taus) if args.taus else evaluation.DEFAULT_TAUS

    try:
        report = evaluation.run_evaluation(
            corpus,
            samples,
            queries,
            config.scoring(),
            mode=args.mode,
            taus=taus,
            k_candidates=min(config.k_candidates, len(corpus)),
            workers=config.effective_workers(),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    out_dir = _check_out_dir(Path(args.out), Path(args.index))
    run_record = {"config": config.to_record(), "mode": report.mode}
    _write_jsonl(
        out_dir / "report.jsonl",
        [{**run_record, **rec} for rec in
         (g.to_record() for g in report.groups.values())],
    )
    _write_jsonl(
        out_dir / "outcomes.jsonl",
        [{**run_record, **o.to_record()} for o in report.outcomes],
    )
    text = report.to_text()
    (out_dir / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _parse_list(raw: str, caster, flag: str) -> tuple:
    try:
        values = tuple(caster(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise CliError(f"bad {flag} value {raw!r}: {exc}") from exc
    if not values:
        raise CliError(f"{flag} must name at least one value")
    return values


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    corpus = _load_index(args.index)
    queries = _load_queries(args.queries)
    try:
        samples = formats.load_eval_samples(Path(args.samples))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load samples: {exc}") from exc

    grid = evaluation.AblationGrid(
        percentiles=(
            _parse_list(args.percentiles, float, "--percentiles")
            if args.percentiles
            else (config.percentile,)
        ),
        strategies=(
            _parse_list(args.strategies, str, "--strategies")
            if args.strategies
            else (config.strategy,)
        ),
        min_overlaps=(
            _parse_list(args.min_overlaps, float, "--min-overlaps")
            if args.min_overlaps
            else (config.min_overlap,)
        ),
        token_aggs=(
            _parse_list(args.token_aggs, str, "--token-aggs")
            if args.token_aggs
            else (config.token_agg,)
        ),
    )
    try:
        rows = evaluation.run_ablation(
            corpus,
            samples,
            queries,
            grid,
            mode=args.mode,
            k_candidates=min(config.k_candidates, len(corpus)),
            workers=config.effective_workers(),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    out_dir = _check_out_dir(Path(args.out), Path(args.index))
    records = []
    for row in rows:
        overall = row.report.overall
        records.append(
            {
                "config": evaluation.config_record(row.config),
                "mean_top1_iou": overall.mean_top1_iou,
                "hit_rates": {
                    f"{tau:g}": rate for tau, rate in overall.hit_rates.items()
                },
                "tokens_selected": overall.tokens_selected,
                "savings_vs_all_regions": overall.savings_vs_all_regions,
                "n_scored": overall.n_scored,
            }
        )
    _write_jsonl(out_dir / "ablation.jsonl", records)

    print(
        f"{'percentile':>10s} {'strategy':>14s} {'min_overlap':>11s} "
        f"{'token_agg':>9s} {'mIoU':>7s} {'hit@0.5':>8s}"
    )
    for row, record in zip(rows, records):
        cfg = row.config
        hit = row.report.overall.hit_rates.get(0.5)
        hit_text = f"{hit:.3f}" if hit is not None else "n/a"
        print(
            f"{cfg.percentile:>10g} {cfg.strategy:>14s} {cfg.min_overlap:>11g} "
            f"{cfg.token_agg:>9s} {record['mean_top1_iou']:>7.3f} {hit_text:>8s}"
        )
    return 0


def cmd_heatmap(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    corpus = _load_index(args.index)
    try:
        query = formats.read_query_embedding(Path(args.query))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load query: {exc}") from exc
    page_id = args.page
    if page_id not in corpus.pages:
        raise CliError(f"page {page_id!r} not in index")

    embedding = corpus.pages[page_id]
    record = corpus.records[page_id]
    matrix = scoring.similarity_matrix(query, embedding)
    vec = scoring.patch_scores(matrix, config.token_agg)
    side = embedding.grid.grid_side
    grid_scores = np.asarray(vec, dtype=np.float64).reshape(side, side)

    out_dir = _check_out_dir(Path(args.out), Path(args.index))
    csv_path = out_dir / f"{page_id}_heatmap.csv"
    with csv_path.open("w", encoding="utf-8") as handle:
        for row in grid_scores:
            handle.write(",".join(repr(float(v)) for v in row) + "\n")

    # 8-bit PGM, min-max normalized; a constant field maps to all zeros.
    lo = float(grid_scores.min())
    hi = float(grid_scores.max())
    if hi > lo:
        pixels = np.round((grid_scores - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros_like(grid_scores, dtype=np.uint8)
    pgm_path = out_dir / f"{page_id}_heatmap.pgm"
    with pgm_path.open("wb") as handle:
        handle.write(f"P5\n{side} {side}\n255\n".encode("ascii"))
        handle.write(pixels.tobytes(order="C"))

    ranking = scoring.score_regions(
        vec,
        record.regions,
        record.page_width,
        record.page_height,
        embedding.grid,
        config.scoring(),
    )
    boxes = {r.region_id: r.bbox for r in record.regions}
    sidecar = []
    for entry in ranking.scores:
        scaled = scale_bbox(
            boxes[entry.region_id],
            record.page_width,
            record.page_height,
            embedding.grid,
        )
        sidecar.append(
            {
                "region_id": entry.region_id,
                "bbox_model": list(scaled.as_tuple()),
                "bbox_page": list(boxes[entry.region_id].as_tuple()),
                "score": entry.score,
                "rank": entry.rank,
                "selected": entry.selected,
            }
        )
    _write_jsonl(out_dir / f"{page_id}_regions.jsonl", sidecar)
    _write_json(
        out_dir / f"{page_id}_heatmap.json",
        {
            "config": config.to_record(),
            "page_id": page_id,
            "query_id": query.query_id,
            "grid_side": side,
            "files": [csv_path.name, pgm_path.name, f"{page_id}_regions.jsonl"],
        },
    )
    print(f"wrote {csv_path.name}, {pgm_path.name} under {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Argument errors are user input errors, so they exit with code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="regionrank",
        description="Region-level document retrieval over OCR bounding boxes.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_index = sub.add_parser("index", help="build an index directory")
    p_index.add_argument("--embeddings", required=True,
                         help="directory of page .emb files")
    p_index.add_argument("--regions", required=True, help="regions.jsonl path")
    p_index.add_argument("--out", required=True, help="index output directory")
    p_index.set_defaults(func=cmd_index)

    p_query = sub.add_parser("query", help="retrieve pages for one query")
    p_query.add_argument("--index", required=True, help="index directory")
    p_query.add_argument("--query", required=True, help="query .emb file")
    p_query.add_argument("--out", help="directory for the JSON result")
    _add_config_options(p_query)
    p_query.set_defaults(func=cmd_query)

    p_eval = sub.add_parser("eval", help="run the evaluation harness")
    p_eval.add_argument("--index", required=True, help="index directory")
    p_eval.add_argument("--samples", required=True, help="samples.jsonl path")
    p_eval.add_argument("--queries", required=True,
                        help="query .emb file or directory of them")
    p_eval.add_argument("--out", required=True, help="report output directory")
    p_eval.add_argument("--mode", choices=list(evaluation.MODES),
                        default="localization")
    p_eval.add_argument("--taus", help="comma-separated IoU thresholds")
    _add_config_options(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="sweep scoring configurations")
    p_ablate.add_argument("--index", required=True, help="index directory")
    p_ablate.add_argument("--samples", required=True, help="samples.jsonl path")
    p_ablate.add_argument("--queries", required=True,
                          help="query .emb file or directory of them")
    p_ablate.add_argument("--out", required=True, help="output directory")
    p_ablate.add_argument("--mode", choices=list(evaluation.MODES),
                          default="localization")
    p_ablate.add_argument("--percentiles", help="comma-separated percentiles")
    p_ablate.add_argument("--strategies", help="comma-separated strategies")
    p_ablate.add_argument("--min-overlaps", dest="min_overlaps",
                          help="comma-separated overlap fractions")
    p_ablate.add_argument("--token-aggs", dest="token_aggs",
                          help="comma-separated token aggregations")
    _add_config_options(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_heat = sub.add_parser("heatmap", help="export a patch-score heatmap")
    p_heat.add_argument("--index", required=True, help="index directory")
    p_heat.add_argument("--query", required=True, help="query .emb file")
    p_heat.add_argument("--page", required=True, help="page id to render")
    p_heat.add_argument("--out", required=True, help="output directory")
    _add_config_options(p_heat)
    p_heat.set_defaults(func=cmd_heatmap)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        logger.exception("unexpected failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
