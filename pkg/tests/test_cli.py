"""End-to-end CLI tests over a miniature synthetic pipeline."""
import json

import pytest

from raglab.cli import main
from raglab.corpus import load_store
from raglab.harness import load_eval_file


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """synth-kb -> build-index -> pretrain -> ra-it / it checkpoints, all tiny."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth-kb", "--out-dir", str(data), "--entities", "100",
                 "--seed", "3"]) == 0
    assert main(["build-index", "--store", str(data / "store.chunks"),
                 "--out", str(data / "store.ridx"),
                 "--out-encoder", str(data / "enc.rdec"),
                 "--dim", "64", "--seed", "3"]) == 0
    assert main(["train-lm", "--mode", "pretrain", "--data", str(data),
                 "--out", str(root / "base.rlm"), "--steps", "12", "--batch", "4",
                 "--dim", "32", "--window", "96", "--seed", "3"]) == 0
    assert main(["train-lm", "--mode", "ra-it", "--data", str(data),
                 "--init", str(root / "base.rlm"),
                 "--encoder", str(data / "enc.rdec"),
                 "--index", str(data / "store.ridx"),
                 "--out", str(root / "ra.rlm"), "--steps", "4", "--batch", "4",
                 "--seed", "3"]) == 0
    return {"root": root, "data": data}


class TestPipeline:
    def test_ingest(self, tmp_path):
        doc1 = tmp_path / "d1.txt"
        doc2 = tmp_path / "d2.txt"
        doc1.write_text(" ".join(f"w{i}" for i in range(250)))
        doc2.write_text(" ".join(f"v{i}" for i in range(80)))
        out = tmp_path / "out.chunks"
        assert main(["ingest", "--source", "wiki", "--max-words", "200",
                     "--out", str(out), str(doc1), str(doc2)]) == 0
        store = load_store(out)
        assert len(store) == 3
        assert store.max_words == 200

    def test_synth_files_exist(self, world):
        data = world["data"]
        for name in ("store.chunks", "pretrain.txt", "train.tsv", "dev.jsonl",
                     "test.jsonl", "shots.jsonl", "kb.json"):
            assert (data / name).exists(), name

    def test_it_mode(self, world):
        root, data = world["root"], world["data"]
        assert main(["train-lm", "--mode", "it", "--data", str(data),
                     "--init", str(root / "base.rlm"),
                     "--out", str(root / "it.rlm"), "--steps", "3", "--batch", "4",
                     "--seed", "3"]) == 0
        assert (root / "it.rlm").exists()

    def test_search_writes_ranked_results(self, world, tmp_path):
        data = world["data"]
        out = tmp_path / "hits.tsv"
        assert main(["search", "--idx", str(data / "store.ridx"),
                     "--store", str(data / "store.chunks"),
                     "--encoder", str(data / "enc.rdec"),
                     "--k", "5", "--query", "what is the color", "--out", str(out)]) == 0
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 5
        first = lines[0].split("\t")
        assert first[0] == "1" and len(first) == 4

    def test_train_retriever_builds_cache_then_reuses(self, world, tmp_path):
        root, data = world["root"], world["data"]
        cache = tmp_path / "sup.lsr"
        args = ["train-retriever", "--cache", str(cache),
                "--encoder", str(data / "enc.rdec"),
                "--index", str(data / "store.ridx"),
                "--store", str(data / "store.chunks"),
                "--lm", str(root / "base.rlm"), "--corpus-sample", "0",
                "--mti-tasks", str(data / "train.tsv"), "--k", "4",
                "--steps", "10", "--lr", "0.005", "--tau", "0.1",
                "--out", str(tmp_path / "tuned.rdec"), "--seed", "3"]
        assert main(args) == 0
        assert cache.exists() and (tmp_path / "tuned.rdec").exists()
        first_cache = cache.read_bytes()
        args[args.index("--out") + 1] = str(tmp_path / "tuned2.rdec")
        assert main(args) == 0  # cache hit path
        assert cache.read_bytes() == first_cache
        assert ((tmp_path / "tuned.rdec").read_bytes()
                == (tmp_path / "tuned2.rdec").read_bytes())

    def test_infer_output_schema(self, world, tmp_path):
        root, data = world["root"], world["data"]
        out = tmp_path / "pred.jsonl"
        assert main(["infer", "--ckpt", str(root / "ra.rlm"),
                     "--idx", str(data / "store.ridx"),
                     "--encoder", str(data / "enc.rdec"),
                     "--store", str(data / "store.chunks"),
                     "--task", str(data / "dev.jsonl"), "--k", "3",
                     "--scorer", "nll", "--out", str(out), "--seed", "3"]) == 0
        _, dev = load_eval_file(data / "dev.jsonl")
        lines = out.read_text().strip().split("\n")
        assert len(lines) == len(dev)
        rec = json.loads(lines[0])
        assert set(rec) == {"id", "prediction", "winner_score", "per_chunk"}
        assert all(set(pc) == {"chunk_id", "weight", "score"} for pc in rec["per_chunk"])

    def test_eval_command(self, world, tmp_path, capsys):
        root, data = world["root"], world["data"]
        out = tmp_path / "rows.jsonl"
        assert main(["eval", "--ckpt", str(root / "ra.rlm"),
                     "--idx", str(data / "store.ridx"),
                     "--encoder", str(data / "enc.rdec"),
                     "--store", str(data / "store.chunks"),
                     "--task", str(data / "test.jsonl"), "--k", "2",
                     "--max-examples", "5", "--max-new-tokens", "2",
                     "--out", str(out), "--seed", "3"]) == 0
        captured = capsys.readouterr()
        assert "exact_match=" in captured.out
        assert len(out.read_text().strip().split("\n")) == 5

    def test_experiment_grid(self, world, tmp_path):
        root, data = world["root"], world["data"]
        grid = tmp_path / "grid.cfg"
        grid.write_text(
            f"store = {data / 'store.chunks'}\n"
            f"tasks = {data / 'test.jsonl'}\n"
            "ks = 1,2\nshots = 0\nmax_examples = 3\nmax_new_tokens = 2\n"
            f"arm.base.lm = {root / 'base.rlm'}\n"
            f"arm.ra.lm = {root / 'ra.rlm'}\n"
            f"arm.ra.encoder = {data / 'enc.rdec'}\n"
            f"arm.ra.index = {data / 'store.ridx'}\n")
        out_dir = tmp_path / "exp"
        assert main(["experiment", "--grid", str(grid), "--out-dir", str(out_dir),
                     "--seed", "3"]) == 0
        rows = [json.loads(l) for l in
                (out_dir / "results.jsonl").read_text().strip().split("\n")]
        assert len(rows) == 3  # base closed-book + ra at k=1,2
        assert (out_dir / "summary.txt").exists()

    def test_unknown_grid_key_rejected(self, world, tmp_path, capsys):
        grid = tmp_path / "bad.cfg"
        grid.write_text("bogus_key = 1\n")
        assert main(["experiment", "--grid", str(grid),
                     "--out-dir", str(tmp_path / "x")]) == 2
        assert "unknown" in capsys.readouterr().err


class TestConfigMerging:
    def test_config_file_supplies_options(self, tmp_path):
        doc = tmp_path / "d.txt"
        doc.write_text(" ".join(f"w{i}" for i in range(30)))
        cfg = tmp_path / "ingest.cfg"
        cfg.write_text("source = wiki\nmax_words = 10\n")
        out = tmp_path / "s.chunks"
        assert main(["ingest", "--config", str(cfg), "--out", str(out), str(doc)]) == 0
        assert load_store(out).max_words == 10

    def test_cli_overrides_config_file(self, tmp_path):
        doc = tmp_path / "d.txt"
        doc.write_text(" ".join(f"w{i}" for i in range(30)))
        cfg = tmp_path / "ingest.cfg"
        cfg.write_text("source = wiki\nmax_words = 10\n")
        out = tmp_path / "s.chunks"
        assert main(["ingest", "--config", str(cfg), "--max-words", "25",
                     "--out", str(out), str(doc)]) == 0
        assert load_store(out).max_words == 25

    def test_unknown_config_key_errors(self, tmp_path, capsys):
        doc = tmp_path / "d.txt"
        doc.write_text("hello world")
        cfg = tmp_path / "ingest.cfg"
        cfg.write_text("source = wiki\nnot_a_key = 1\n")
        assert main(["ingest", "--config", str(cfg), "--out",
                     str(tmp_path / "s.chunks"), str(doc)]) == 2
        assert "unknown" in capsys.readouterr().err

    def test_missing_required_option(self, tmp_path, capsys):
        doc = tmp_path / "d.txt"
        doc.write_text("hello world")
        assert main(["ingest", "--source", "wiki", str(doc)]) == 2
        assert "required" in capsys.readouterr().err
