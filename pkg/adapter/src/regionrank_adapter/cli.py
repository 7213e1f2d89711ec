"""Command line for batch exports.

``regionrank-adapter pages`` embeds page images; ``regionrank-adapter
queries`` embeds query strings given as ``id=text`` pairs or a JSONL file
with ``query_id`` and ``text`` fields.  Exit codes: 0 success, 1 usage or
input error.
"""

import argparse
import json
import sys
from pathlib import Path

from .config import (
    DEFAULT_DIM,
    DEFAULT_GRID_SIDE,
    DEFAULT_INPUT_SIDE,
    HASH_MODEL_ID,
    AdapterConfig,
    AdapterError,
)
from .export import export_pages, export_queries


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--model", default=HASH_MODEL_ID,
                        help="model identifier (default: deterministic hash backend)")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--grid-side", type=int, default=DEFAULT_GRID_SIDE)
    parser.add_argument("--input-side", type=int, default=DEFAULT_INPUT_SIDE)
    parser.add_argument("--dim", type=int, default=DEFAULT_DIM)
    parser.add_argument(
        "--exclude-special-tokens", action="store_true",
        help="drop query marker tokens instead of exporting their vectors",
    )


def _config(args: argparse.Namespace) -> AdapterConfig:
    return AdapterConfig(
        output_dir=Path(args.out),
        model_id=args.model,
        device=args.device,
        batch_size=args.batch_size,
        grid_side=args.grid_side,
        input_side=args.input_side,
        dim=args.dim,
        include_special_tokens=not args.exclude_special_tokens,
    )


def cmd_pages(args: argparse.Namespace) -> int:
    images = [Path(p) for p in args.images]
    written = export_pages(images, _config(args))
    print(f"exported {len(written)} page embedding(s) to {args.out}")
    return 0


def _parse_query_args(args: argparse.Namespace) -> dict[str, str]:
    queries: dict[str, str] = {}
    for pair in args.pairs:
        query_id, sep, text = pair.partition("=")
        if not sep:
            raise AdapterError(
                f"query argument {pair!r} is not of the form id=text"
            )
        queries[query_id] = text
    if args.file:
        for line_no, line in enumerate(
            Path(args.file).read_text(encoding="utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                queries[record["query_id"]] = record["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise AdapterError(
                    f"{args.file}:{line_no}: expected JSON with "
                    f"query_id and text fields ({exc})"
                ) from exc
    if not queries:
        raise AdapterError("no queries given (use id=text pairs or --file)")
    return queries


def cmd_queries(args: argparse.Namespace) -> int:
    written = export_queries(_parse_query_args(args), _config(args))
    print(f"exported {len(written)} query embedding(s) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="regionrank-adapter",
        description="Export page/query embeddings in the engine wire format",
    )
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    pages = sub.add_parser("pages", help="embed page images")
    pages.add_argument("images", nargs="+", help="image files (stem = page id)")
    _add_common(pages)
    pages.set_defaults(func=cmd_pages)

    queries = sub.add_parser("queries", help="embed query strings")
    queries.add_argument("pairs", nargs="*", metavar="id=text",
                         help="inline queries")
    queries.add_argument("--file", help="JSONL file of {query_id, text}")
    _add_common(queries)
    queries.set_defaults(func=cmd_queries)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (AdapterError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
