import json

import numpy as np
import pytest

from srctrace.cli import main
from srctrace.store import EmbeddingSet, read_embeddings, write_embeddings

SMALL = {
    "synth": {"n_classes": 5, "dim": 8, "samples_per_class": 12, "unseen_classes": 2, "cluster_spread": 0.2},
    "model": {"hidden": [16], "embedding_dim": 6},
    "train": {"epochs": 8, "warmup_epochs": 2, "peak_lr": 0.01, "eval_interval": 4},
    "probe": {"epochs": 5},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture()
def small_cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 1 and "usage" in err

    def test_no_subcommand(self, capsys):
        assert run(capsys)[0] == 1

    def test_missing_required_out(self, capsys, tmp_path):
        assert run(capsys, "gen-data")[0] == 1

    def test_missing_file_is_data_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "eval-eer", "--input", tmp_path / "nope.embf")
        assert code == 2 and len(err.strip().splitlines()) == 1

    def test_unknown_config_key(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"epochz": 3}}))
        code, _, err = run(capsys, "gen-data", "--config", bad, "--out", tmp_path / "d")
        assert code == 2 and "epochz" in err

    def test_numeric_failure(self, capsys, tmp_path):
        cfg = {"synth": {"n_classes": 4, "dim": 8, "samples_per_class": 10},
               "train": {"epochs": 20, "warmup_epochs": 1, "peak_lr": 1e6, "loss": "softmax"}}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert run(capsys, "gen-data", "--config", path, "--out", tmp_path / "d")[0] == 0
        with pytest.warns(RuntimeWarning):
            code, _, err = run(capsys, "train", "--config", path, "--train", tmp_path / "d" / "train.embf",
                               "--out", tmp_path / "m.ckpt")
        assert code == 3 and "non-finite" in err


def test_perfect_separation_eer_zero(capsys, tmp_path):
    emb = EmbeddingSet(np.repeat(np.eye(3), 4, axis=0), np.repeat(np.arange(3), 4), ("a", "b", "c"))
    write_embeddings(emb, tmp_path / "e.embf")
    code, doc, _ = run(capsys, "eval-eer", "--input", tmp_path / "e.embf")
    assert code == 0 and doc["result"]["eer"] == 0.0
    code, doc, _ = run(capsys, "eval-eer", "--input", tmp_path / "e.embf", "--bins", 1000)
    assert code == 0 and doc["result"]["eer"] == 0.0


def test_config_echo_defaults(capsys, tmp_path):
    code, doc, _ = run(capsys, "gen-data", "--out", tmp_path / "d")
    assert code == 0
    assert doc["config"]["margin"] == {"m": 0.3, "s": 30.0}
    assert doc["config"]["sampler"]["mode"] == "balanced"
    assert doc["config"]["train"]["loss"] == "ge2e"


def _pipeline(capsys, root, cfg_path, threads):
    d = root / "data"
    steps = [
        ("gen-data", "--out", d),
        ("train", "--train", d / "train.embf", "--dev", d / "dev.embf", "--out", root / "m.ckpt"),
        ("embed", "--checkpoint", root / "m.ckpt", "--input", d / "dev.embf", "--out", root / "dev_emb.embf"),
        ("eval-eer", "--input", root / "dev_emb.embf", "--by-condition", "--manifest", d / "manifest.jsonl",
         "--out", root / "eer.json"),
        ("probe", "--input", root / "dev_emb.embf", "--out", root / "confusion.csv"),
        ("project", "--input", root / "dev_emb.embf", "--out", root / "proj.csv"),
    ]
    docs = []
    for step in steps:
        code, doc, err = run(capsys, *step, "--config", cfg_path, "--seed", 3, "--threads", threads)
        assert code == 0, err
        docs.append(doc)
    return docs


OUTPUTS = ["data/train.embf", "data/dev.embf", "data/manifest.jsonl", "m.ckpt", "m.ckpt.history.jsonl",
           "dev_emb.embf", "eer.json", "confusion.csv", "proj.csv"]


def test_pipeline_reproducible_across_threads(capsys, tmp_path, small_cfg):
    a = _pipeline(capsys, tmp_path / "a", small_cfg, 1)
    b = _pipeline(capsys, tmp_path / "b", small_cfg, 4)
    for name in OUTPUTS:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert [d["config"] for d in a] == [d["config"] for d in b]
    conditions = a[3]["result"]["by_condition"]
    assert {"model_seen=true", "model_seen=false"} <= set(conditions)
    assert read_embeddings(tmp_path / "a" / "dev_emb.embf").dim == 6


def test_config_echo_round_trips(capsys, tmp_path, small_cfg):
    _pipeline(capsys, tmp_path / "a", small_cfg, 1)
    code, doc, _ = run(capsys, "train", "--config", small_cfg, "--seed", 3, "--train",
                       tmp_path / "a/data/train.embf", "--out", tmp_path / "x.ckpt")
    echo = tmp_path / "echo.json"
    echo.write_text(json.dumps(doc))
    code, again, _ = run(capsys, "train", "--config", echo, "--train", tmp_path / "a/data/train.embf",
                         "--out", tmp_path / "y.ckpt")
    assert code == 0 and again["config"] == doc["config"]
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_by_condition_needs_manifest(capsys, tmp_path):
    emb = EmbeddingSet(np.repeat(np.eye(3), 2, axis=0), np.repeat(np.arange(3), 2), ("a", "b", "c"))
    write_embeddings(emb, tmp_path / "e.embf")
    assert run(capsys, "eval-eer", "--input", tmp_path / "e.embf", "--by-condition")[0] == 2
