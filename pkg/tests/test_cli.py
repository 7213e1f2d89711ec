"""End-to-end command-line workflows against the planted corpus."""

import json

import pytest

from regionrank.cli import main, parse_config_file, resolve_config, RunConfig

pytestmark = pytest.mark.usefixtures("disk_corpus")


def run(argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture
def built_index(disk_corpus, tmp_path):
    index_dir = tmp_path / "index"
    code = run([
        "index",
        "--embeddings", disk_corpus.embeddings_dir,
        "--regions", disk_corpus.regions_path,
        "--out", index_dir,
    ])
    assert code == 0
    return index_dir


class TestIndexCommand:
    def test_builds_expected_layout(self, built_index, capsys):
        assert (built_index / "manifest.json").is_file()
        assert (built_index / "regions.jsonl").is_file()
        assert len(list((built_index / "pages").glob("*.emb"))) == 12

    def test_missing_embeddings_dir_fails_validation(self, tmp_path):
        code = run([
            "index", "--embeddings", tmp_path / "nope",
            "--regions", tmp_path / "nope.jsonl", "--out", tmp_path / "out",
        ])
        assert code == 1


class TestQueryCommand:
    def test_planted_region_tops_the_output(
        self, built_index, disk_corpus, tmp_path, capsys
    ):
        out_dir = tmp_path / "results"
        code = run([
            "query", "--index", built_index, "--query", disk_corpus.query_path,
            "--out", out_dir, "--top-pages", 2,
        ])
        assert code == 0
        payload = json.loads((out_dir / "query_q_planted.json").read_text())
        assert payload["query_id"] == "q_planted"
        assert payload["config"]["top_pages"] == 2
        top = payload["results"][0]
        assert top["page_id"] == disk_corpus.corpus.planted_page_id
        assert top["regions"][0]["region_id"] == "region_signal"
        assert top["regions"][0]["selected"] is True
        assert len(top["regions"][0]["bbox"]) == 4
        stdout = capsys.readouterr().out
        assert "page_007" in stdout

    def test_output_is_deterministic(self, built_index, disk_corpus, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for out in (out_a, out_b):
            assert run([
                "query", "--index", built_index,
                "--query", disk_corpus.query_path, "--out", out,
            ]) == 0
        assert (out_a / "query_q_planted.json").read_bytes() == (
            out_b / "query_q_planted.json"
        ).read_bytes()

    def test_out_inside_index_rejected(self, built_index, disk_corpus):
        code = run([
            "query", "--index", built_index, "--query", disk_corpus.query_path,
            "--out", built_index / "sub",
        ])
        assert code == 1


class TestEvalCommand:
    def test_writes_reports_with_perfect_planted_metrics(
        self, built_index, disk_corpus, tmp_path, capsys
    ):
        out_dir = tmp_path / "eval"
        code = run([
            "eval", "--index", built_index, "--samples", disk_corpus.samples_path,
            "--queries", disk_corpus.queries_dir, "--out", out_dir,
        ])
        assert code == 0
        report_rows = [
            json.loads(line)
            for line in (out_dir / "report.jsonl").read_text().splitlines()
        ]
        overall = next(r for r in report_rows if r["group"] == "overall")
        assert overall["mean_top1_iou"] == 1.0
        assert overall["hit_rates"]["0.5"] == 1.0
        assert overall["failure_counts"]["hit"] == 1
        assert overall["config"]["percentile"] == 50.0
        outcomes = [
            json.loads(line)
            for line in (out_dir / "outcomes.jsonl").read_text().splitlines()
        ]
        assert outcomes[0]["sample_id"] == "s_planted"
        assert outcomes[0]["failure_class"] == "hit"
        assert "overall" in (out_dir / "report.txt").read_text()
        assert "hit@0.5" in capsys.readouterr().out

    def test_retrieval_mode(self, built_index, disk_corpus, tmp_path):
        out_dir = tmp_path / "eval_retrieval"
        code = run([
            "eval", "--index", built_index, "--samples", disk_corpus.samples_path,
            "--queries", disk_corpus.queries_dir, "--out", out_dir,
            "--mode", "retrieval",
        ])
        assert code == 0
        outcomes = [
            json.loads(line)
            for line in (out_dir / "outcomes.jsonl").read_text().splitlines()
        ]
        assert outcomes[0]["retrieved_page_id"] == "page_007"
        assert outcomes[0]["top1_iou"] == 1.0

    def test_custom_taus(self, built_index, disk_corpus, tmp_path):
        out_dir = tmp_path / "eval_taus"
        code = run([
            "eval", "--index", built_index, "--samples", disk_corpus.samples_path,
            "--queries", disk_corpus.queries_dir, "--out", out_dir,
            "--taus", "0.3,0.6,0.9",
        ])
        assert code == 0
        row = json.loads((out_dir / "report.jsonl").read_text().splitlines()[0])
        assert set(row["hit_rates"]) == {"0.3", "0.6", "0.9"}

    def test_bad_taus_rejected(self, built_index, disk_corpus, tmp_path):
        code = run([
            "eval", "--index", built_index, "--samples", disk_corpus.samples_path,
            "--queries", disk_corpus.queries_dir, "--out", tmp_path / "x",
            "--taus", "0.3,banana",
        ])
        assert code == 1

    def test_deterministic_outputs(self, built_index, disk_corpus, tmp_path):
        outs = []
        for name in ("e1", "e2"):
            out_dir = tmp_path / name
            assert run([
                "eval", "--index", built_index,
                "--samples", disk_corpus.samples_path,
                "--queries", disk_corpus.queries_dir, "--out", out_dir,
                "--workers", 3,
            ]) == 0
            outs.append((out_dir / "report.jsonl").read_bytes())
        assert outs[0] == outs[1]


class TestAblateCommand:
    def test_grid_rows_in_order(self, built_index, disk_corpus, tmp_path, capsys):
        out_dir = tmp_path / "ablate"
        code = run([
            "ablate", "--index", built_index, "--samples", disk_corpus.samples_path,
            "--queries", disk_corpus.queries_dir, "--out", out_dir,
            "--percentiles", "25,75", "--strategies", "max,iou_weighted",
            "--min-overlaps", "0.1,0.25,0.5",
        ])
        assert code == 0
        rows = [
            json.loads(line)
            for line in (out_dir / "ablation.jsonl").read_text().splitlines()
        ]
        assert len(rows) == 12
        assert rows[0]["config"]["percentile"] == 25.0
        assert rows[0]["config"]["min_overlap"] == 0.1
        assert rows[-1]["config"]["percentile"] == 75.0
        assert rows[-1]["config"]["strategy"] == "iou_weighted"
        # The planted signal is insensitive to every configuration.
        assert all(r["mean_top1_iou"] == 1.0 for r in rows)
        assert "percentile" in capsys.readouterr().out

    def test_bad_strategy_rejected(self, built_index, disk_corpus, tmp_path):
        code = run([
            "ablate", "--index", built_index, "--samples", disk_corpus.samples_path,
            "--queries", disk_corpus.queries_dir, "--out", tmp_path / "x",
            "--strategies", "max,median",
        ])
        assert code == 1


class TestHeatmapCommand:
    def test_exports_grid_and_sidecar(self, built_index, disk_corpus, tmp_path):
        out_dir = tmp_path / "heat"
        code = run([
            "heatmap", "--index", built_index, "--query", disk_corpus.query_path,
            "--page", "page_007", "--out", out_dir,
        ])
        assert code == 0
        csv_lines = (out_dir / "page_007_heatmap.csv").read_text().splitlines()
        assert len(csv_lines) == 32
        grid = [[float(v) for v in line.split(",")] for line in csv_lines]
        assert all(len(row) == 32 for row in grid)
        # Signal patches score 0.9, background 0.1; check one of each.
        assert grid[5][4] == pytest.approx(0.9, abs=1e-4)
        assert grid[0][0] == pytest.approx(0.1, abs=1e-4)

        pgm = (out_dir / "page_007_heatmap.pgm").read_bytes()
        assert pgm.startswith(b"P5\n32 32\n255\n")
        pixels = pgm[len(b"P5\n32 32\n255\n"):]
        assert len(pixels) == 32 * 32
        assert max(pixels) == 255 and min(pixels) == 0

        sidecar = [
            json.loads(line)
            for line in (out_dir / "page_007_regions.jsonl").read_text().splitlines()
        ]
        assert sidecar[0]["region_id"] == "region_signal"
        assert sidecar[0]["selected"] is True
        meta = json.loads((out_dir / "page_007_heatmap.json").read_text())
        assert meta["grid_side"] == 32
        assert meta["config"]["token_agg"] == "max"

    def test_constant_field_renders_black(self, built_index, tmp_path, disk_corpus):
        # A query orthogonal to every patch scores 0 everywhere.
        import numpy as np
        from regionrank.formats import QueryEmbedding, write_query_embedding

        flat = np.zeros((1, 16), dtype=np.float32)
        flat[0, 5] = 1.0
        qpath = tmp_path / "flat.emb"
        write_query_embedding(QueryEmbedding("q_flat", flat), qpath)
        out_dir = tmp_path / "heat_flat"
        assert run([
            "heatmap", "--index", built_index, "--query", qpath,
            "--page", "page_000", "--out", out_dir,
        ]) == 0
        pgm = (out_dir / "page_000_heatmap.pgm").read_bytes()
        pixels = pgm[len(b"P5\n32 32\n255\n"):]
        assert set(pixels) == {0}

    def test_unknown_page_rejected(self, built_index, disk_corpus, tmp_path):
        code = run([
            "heatmap", "--index", built_index, "--query", disk_corpus.query_path,
            "--page", "page_zzz", "--out", tmp_path / "x",
        ])
        assert code == 1


class TestConfigResolution:
    def test_file_then_flag_precedence(self, built_index, disk_corpus, tmp_path):
        config_path = tmp_path / "run.cfg"
        config_path.write_text(
            "percentile = 75\nstrategy = mean  # region aggregation\n"
        )
        out_dir = tmp_path / "cfg_out"
        code = run([
            "query", "--index", built_index, "--query", disk_corpus.query_path,
            "--out", out_dir, "--config", config_path, "--percentile", "25",
        ])
        assert code == 0
        payload = json.loads((out_dir / "query_q_planted.json").read_text())
        # Flag beats file; file beats default.
        assert payload["config"]["percentile"] == 25.0
        assert payload["config"]["strategy"] == "mean"
        assert payload["config"]["min_overlap"] == 0.25

    def test_unknown_key_rejected(self, tmp_path):
        config_path = tmp_path / "run.cfg"
        config_path.write_text("patch_size = 14\n")
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config_file(config_path)

    def test_malformed_line_rejected(self, tmp_path):
        config_path = tmp_path / "run.cfg"
        config_path.write_text("percentile 75\n")
        with pytest.raises(ValueError, match="key = value"):
            parse_config_file(config_path)

    def test_run_config_validation(self):
        with pytest.raises(ValueError, match="top_pages"):
            RunConfig(k_candidates=2, top_pages=5)
        with pytest.raises(ValueError, match="percentile"):
            RunConfig(percentile=400.0)

    def test_defaults_survive_resolution(self, tmp_path):
        import argparse

        config = resolve_config(argparse.Namespace())
        assert config.token_agg == "max"
        assert config.strategy == "max"
        assert config.percentile == 50.0
        assert config.min_overlap == 0.25
        assert config.k_candidates == 100
        assert config.top_pages == 5


class TestExitCodes:
    def test_unknown_flag_is_a_usage_error(self):
        assert run(["query", "--no-such-flag"]) == 1

    def test_unknown_command_is_a_usage_error(self):
        assert run(["frobnicate"]) == 1

    def test_missing_index_is_validation_error(self, tmp_path, disk_corpus):
        code = run([
            "query", "--index", tmp_path / "missing",
            "--query", disk_corpus.query_path,
        ])
        assert code == 1
