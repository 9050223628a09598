import json

import numpy as np
import pytest

from msgbart import tensor as T
from msgbart.cli import main

TINY = {
    "world": {"num_videos": 10, "frames": 4, "window": 2},
    "model": {"lm": {"d_model": 16, "heads": 2, "encoder_layers": 1, "decoder_layers": 1, "ffn_width": 32}, "graph_heads": 2},
    "train": {"steps": 6, "batch_size": 4, "log_every": 2, "eval_every": 3},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(root / "tiny.json"), "--out", str(root / "data")]) == 0
    return root


def test_gen_data_layout_and_stats(corpus_dir):
    data = corpus_dir / "data"
    for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "splits.json", "stats.json", "labels.json", "vocab.txt"):
        assert (data / name).exists()
    assert len(list((data / "assets").glob("*.graph.json"))) == 10
    stats = json.loads((data / "stats.json").read_text())
    recount = {}
    for split in ("train", "dev", "test"):
        for line in (data / f"{split}.jsonl").read_text().splitlines():
            kind = json.loads(line)["kind"]
            recount[kind] = recount.get(kind, 0) + 1
    assert {k: v for k, v in stats["kinds"].items() if v} == recount
    assert sum(s["videos"] for s in stats["splits"].values()) == stats["videos"] == 10


def test_gen_data_is_byte_identical(corpus_dir, tmp_path, capsys):
    code, _ = run(capsys, "gen-data", "--config", corpus_dir / "tiny.json", "--out", tmp_path / "again")
    assert code == 0
    first = sorted(p.relative_to(corpus_dir / "data") for p in (corpus_dir / "data").rglob("*") if p.is_file())
    second = sorted(p.relative_to(tmp_path / "again") for p in (tmp_path / "again").rglob("*") if p.is_file())
    assert first == second
    for rel in first:
        assert (corpus_dir / "data" / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()


def test_invalid_config_exits_1(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"world": {"nuM_videos": 3}}))
    assert run(capsys, "gen-data", "--config", tmp_path / "bad.json", "--out", tmp_path / "x")[0] == 1
    assert run(capsys, "gen-data", "--config", tmp_path / "missing.json", "--out", tmp_path / "x")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "train", "--data", tmp_path / "nowhere", "--out-checkpoint", tmp_path / "m.ckpt")[0] == 1


def test_graph_rn(corpus_dir, capsys):
    data = corpus_dir / "data"
    code, out = run(capsys, "graph", "--assets", data, "--video-id", "v00003", "--rn")
    assert code == 0
    doc = json.loads(out)
    graph = json.loads((data / "assets" / "v00003.graph.json").read_text())
    assert len(doc["frames"]) == len(graph["frames"])
    for f, g in zip(doc["frames"], graph["frames"]):
        n, m = len(g["objects"]), len(g["relations"])
        assert f["num_nodes"] == n + m and f["num_edges"] == 2 * m == len(f["edges"])


def test_graph_rank_and_triplets(corpus_dir, capsys):
    data = corpus_dir / "data"
    code, out = run(capsys, "graph", "--assets", data, "--video-id", "v00001", "--frame", "2", "--rank", "--question", "what is cup holding ?")
    assert code == 0
    (frame,) = json.loads(out)["frames"]
    scores = [r["score"] for r in frame["ranking"]]
    assert scores == sorted(scores, reverse=True)
    code, out = run(capsys, "graph", "--assets", data, "--video-id", "v00001", "--triplets", "--question", "what is cup holding ?")
    graph = json.loads((data / "assets" / "v00001.graph.json").read_text())
    assert code == 0
    assert [len(f["triplets"]) for f in json.loads(out)["frames"]] == [len(f["relations"]) for f in graph["frames"]]


def test_graph_errors(corpus_dir, capsys):
    data = corpus_dir / "data"
    assert run(capsys, "graph", "--assets", data, "--video-id", "v99999", "--rn")[0] == 1
    assert run(capsys, "graph", "--assets", data, "--video-id", "v00001", "--rank")[0] == 1
    assert run(capsys, "graph", "--assets", data, "--video-id", "v00001", "--frame", "40", "--rn")[0] == 1


@pytest.fixture(scope="module")
def trained(corpus_dir):
    ckpt = corpus_dir / "m.ckpt"
    assert main(["train", "--config", str(corpus_dir / "tiny.json"), "--data", str(corpus_dir / "data"), "--out-checkpoint", str(ckpt)]) == 0
    return ckpt


def test_train_writes_log_and_checkpoint(trained):
    lines = [json.loads(l) for l in trained.with_suffix(".log.jsonl").read_text().splitlines()]
    assert [l["step"] for l in lines if "loss" in l] == [1, 2, 3, 4, 6]
    assert any("dev_accuracy" in l for l in lines)
    assert all(np.isfinite(l["loss"]) for l in lines if "loss" in l)


def test_eval_report_and_beam_one(corpus_dir, trained, capsys):
    data = corpus_dir / "data"
    code, greedy = run(capsys, "eval", "--checkpoint", trained, "--data", data, "--decode", "greedy")
    assert code == 0
    report = json.loads(greedy)
    for key in ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "answer_accuracy"):
        assert 0.0 <= report[key] <= 1.0
    code, beam = run(capsys, "eval", "--checkpoint", trained, "--data", data, "--decode", "beam", "--beam", "1")
    assert code == 0 and beam == greedy


def test_eval_config_mismatch_lists_keys(corpus_dir, trained, tmp_path, capsys, caplog):
    other = json.loads(json.dumps(TINY))
    other["model"]["pointer_mode"] = "single"
    other["model"]["lm"]["dropout"] = 0.2
    (tmp_path / "other.json").write_text(json.dumps(other))
    code, _ = run(capsys, "eval", "--checkpoint", trained, "--data", corpus_dir / "data", "--config", tmp_path / "other.json")
    assert code == 2
    assert "model.lm.dropout" in caplog.text and "model.pointer_mode" in caplog.text


def test_eval_bad_checkpoint(corpus_dir, tmp_path, capsys):
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert run(capsys, "eval", "--checkpoint", tmp_path / "junk.ckpt", "--data", corpus_dir / "data")[0] == 2
    assert run(capsys, "eval", "--checkpoint", tmp_path / "none.ckpt", "--data", corpus_dir / "data")[0] == 1


def test_gradcheck_passes(capsys):
    code, out = run(capsys, "gradcheck", "--no-sweep")
    doc = json.loads(out)
    assert code == 0 and doc["passed"]
    assert doc["worst"]["rel_error"] < 1e-3
    assert {"graph_attention", "pointer", "end_to_end.lm", "end_to_end.gvp"} <= set(doc["max_rel_error"]["0.0001"])


def test_gradcheck_catches_corrupted_backward_rule(monkeypatch, capsys, caplog):
    def bad_sigmoid(x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return T._node(y, (x,), lambda g: (1.5 * g * y * (1.0 - y),))

    monkeypatch.setattr(T, "sigmoid", bad_sigmoid)
    code, out = run(capsys, "gradcheck", "--no-sweep")
    doc = json.loads(out)
    assert code == 2 and not doc["passed"]
    assert doc["worst"]["param"] and doc["worst"]["param"] in caplog.text


def test_schema_command_matches_docs(capsys):
    from pathlib import Path

    code, out = run(capsys, "schema")
    docs = Path(__file__).resolve().parents[1] / "docs" / "config.schema.json"
    assert code == 0 and json.loads(out) == json.loads(docs.read_text())
