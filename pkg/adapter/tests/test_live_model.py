"""End-to-end smoke test with a real model.

Downloads weights, so it is opt-in:

    REGIONRANK_LIVE_MODEL=vidore/colpali-v1.2-hf python3 -m pytest tests/test_live_model.py -v
"""

import json
import math
import os

import pytest
from PIL import Image, ImageDraw

LIVE_MODEL = os.environ.get("REGIONRANK_LIVE_MODEL")

pytestmark = pytest.mark.skipif(
    not LIVE_MODEL,
    reason="set REGIONRANK_LIVE_MODEL=<model-id> to run the live smoke test",
)


def _draw_document_page(path, width=768, height=1024):
    """A synthetic page: title bar, two text-ish columns, a figure box."""
    image = Image.new("RGB", (width, height), "white")
    draw = ImageDraw.Draw(image)
    draw.rectangle([40, 30, width - 40, 90], outline="black", width=3)
    for row in range(12):
        y = 140 + row * 30
        draw.line([60, y, width // 2 - 30, y], fill="black", width=6)
    draw.rectangle([width // 2 + 20, 140, width - 60, 480], fill="lightgray")
    for row in range(10):
        y = 540 + row * 30
        draw.line([60, y, width - 60, y], fill="gray", width=5)
    image.save(path, format="PNG")
    return path


def test_live_export_query_heatmap(tmp_path):
    from regionrank.cli import main as engine_main

    from regionrank_adapter import AdapterConfig, ColPaliBackend, export_pages, export_queries

    backend = ColPaliBackend(LIVE_MODEL, device="cpu", batch_size=1)
    page_png = _draw_document_page(tmp_path / "sample_page.png")

    probe = backend.embed_images([page_png])[0]
    grid_side = math.isqrt(probe.shape[0])
    if grid_side * grid_side != probe.shape[0]:
        pytest.skip(f"model emits {probe.shape[0]} patches, not a square grid")
    dim = probe.shape[1]

    out = tmp_path / "export"
    config = AdapterConfig(
        output_dir=out,
        model_id=LIVE_MODEL,
        grid_side=grid_side,
        input_side=grid_side * 14,
        dim=dim,
    )
    export_pages([page_png], config, backend=backend)
    export_queries({"q_live": "what does the figure show"}, config,
                   backend=backend)

    width, height = Image.open(page_png).size
    regions = [
        {"id": "title", "bbox": [40, 30, width - 40, 90],
         "text": "Quarterly report"},
        {"id": "left_col", "bbox": [60, 140, width // 2 - 30, 500],
         "text": "left column text"},
        {"id": "figure", "bbox": [width // 2 + 20, 140, width - 60, 480],
         "text": ""},
        {"id": "footer", "bbox": [60, 540, width - 60, 840],
         "text": "footer text"},
    ]
    regions_path = tmp_path / "regions.jsonl"
    regions_path.write_text(json.dumps({
        "page_id": "sample_page", "document_id": "doc_live",
        "page_width": width, "page_height": height, "regions": regions,
    }) + "\n")

    index_dir = tmp_path / "index"
    assert engine_main(
        ["index", "--embeddings", str(out), "--regions", str(regions_path),
         "--out", str(index_dir)]
    ) == 0

    results_dir = tmp_path / "results"
    assert engine_main(
        ["query", "--index", str(index_dir),
         "--query", str(out / "q_live.emb"), "--out", str(results_dir)]
    ) == 0
    payload = json.loads((results_dir / "query_q_live.json").read_text())
    assert payload["results"][0]["regions"], "expected a non-empty region ranking"

    heat_dir = tmp_path / "heat"
    assert engine_main(
        ["heatmap", "--index", str(index_dir),
         "--query", str(out / "q_live.emb"), "--page", "sample_page",
         "--out", str(heat_dir)]
    ) == 0
    rows = [
        [float(v) for v in line.split(",")]
        for line in (heat_dir / "sample_page_heatmap.csv").read_text().strip().splitlines()
    ]
    flat_max = max((v, r, c) for r, row in enumerate(rows)
                   for c, v in enumerate(row))
    _, max_row, max_col = flat_max
    patch = config.input_side / grid_side
    cx = (max_col + 0.5) * patch * width / config.input_side
    cy = (max_row + 0.5) * patch * height / config.input_side
    assert any(
        b[0] <= cx <= b[2] and b[1] <= cy <= b[3]
        for b in (r["bbox"] for r in regions)
    ), "hottest patch center should fall inside some OCR region"
