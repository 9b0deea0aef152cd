import contextlib
import dataclasses
import io
import json
import re

import numpy as np
import pytest

from ecgnn import numkit as nk
from ecgnn import pipeline
from ecgnn.cli import main
from ecgnn.datagen import count_codebook, gen_count_task, load_dataset, save_dataset
from ecgnn.pipeline import Model, ModelConfig, evaluate
from test_datagen import tree_digest

GEN = ["--sizes", "2-3,3-5,2-3", "--dim", "8", "--samples", "40", "--test-samples", "12"]
TRAIN = ["--d", "8", "--batch-size", "16", "--lr", "3e-3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def kv(line):
    return dict(tok.split("=", 1) for tok in line.split())


@pytest.fixture(scope="module")
def word_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "word"
    assert main(["gen", "--task", "word", "--seed", "3", "--out", str(root), *GEN]) == 0
    return root


@pytest.fixture(scope="module")
def trained(word_dir, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        assert main(["train", "--data", str(word_dir), "--ckpt-out", str(ckpt), "--epochs", "2", *TRAIN]) == 0
    return ckpt, buf.getvalue()


def test_gen_summary_and_determinism(capsys, tmp_path):
    code, out, _ = run(capsys, "gen", "--task", "choice", "--seed", 4, "--out", tmp_path / "a", *GEN)
    assert code == 0
    fields = kv(out.strip().splitlines()[-1])
    assert fields["task"] == "choice" and fields["samples"] == "52" and fields["test"] == "12"
    assert 0 <= float(fields["label_p"]) <= 1
    run(capsys, "gen", "--task", "choice", "--seed", 4, "--out", tmp_path / "b", "--threads", 3, *GEN)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_gen_usage_errors(capsys, tmp_path, word_dir):
    assert run(capsys, "gen", "--task", "poetry", "--out", tmp_path / "x")[0] == 2
    assert run(capsys, "gen", "--task", "word")[0] == 2
    assert run(capsys, "gen", "--task", "word", "--out", word_dir, *GEN)[0] == 2
    assert run(capsys, "gen", "--task", "word", "--out", tmp_path / "y", "--seed", -1)[0] == 2
    assert run(capsys, "frobnicate")[0] == 2


def test_seed_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("ECGNN_SEED", "17")
    run(capsys, "gen", "--task", "word", "--out", tmp_path / "env", *GEN)
    monkeypatch.delenv("ECGNN_SEED")
    run(capsys, "gen", "--task", "word", "--out", tmp_path / "flag", "--seed", 17, *GEN)
    run(capsys, "gen", "--task", "word", "--out", tmp_path / "zero", *GEN)
    assert tree_digest(tmp_path / "env") == tree_digest(tmp_path / "flag") != tree_digest(tmp_path / "zero")


def test_config_file_precedence(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"samples": 10, "test-samples": 2, "seed": 5, "dim": 8, "sizes": "2-3,3-5,2-3"}))
    code, out, _ = run(capsys, "gen", "--task", "word", "--config", cfg, "--samples", 6, "--out", tmp_path / "d")
    assert code == 0 and kv(out.splitlines()[-1])["samples"] == "8"
    assert load_dataset(tmp_path / "d").info["seed"] == 5
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "gen", "--task", "word", "--config", cfg, "--out", tmp_path / "e")[0] == 2


def test_zero_epochs_checkpoint_is_initialisation(capsys, tmp_path, word_dir):
    ckpt = tmp_path / "init.ckpt"
    assert run(capsys, "train", "--data", word_dir, "--ckpt-out", ckpt, "--epochs", 0, "--seed", 2, *TRAIN)[0] == 0
    ds = load_dataset(word_dir)
    fresh = Model(ModelConfig(task="word", d=8, d_c=8, d_v=8, d_q=8, n_classes=ds.n_classes, seed=2))
    loaded = Model.load(ckpt)
    assert loaded.config == fresh.config
    a, b = loaded.state_dict(), fresh.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_train_log_and_eval_agree(capsys, trained, word_dir):
    ckpt, log = trained
    epochs = [kv(l) for l in log.splitlines() if l.startswith("epoch=")]
    assert [e["epoch"] for e in epochs] == ["1", "2"]
    assert all(np.isfinite(float(e["loss"])) for e in epochs)
    code, out, _ = run(capsys, "eval", "--data", word_dir, "--ckpt", ckpt)
    res = kv(out.strip())
    assert code == 0 and res["accuracy"] == epochs[-1]["metric"] and res["n"] == "12"
    direct = evaluate(load_dataset(word_dir).split("test"), Model.load(ckpt))["accuracy"]
    assert float(res["accuracy"]) == direct


def test_train_is_reproducible(capsys, tmp_path, trained, word_dir):
    ckpt, log = trained
    again = tmp_path / "again.ckpt"
    _, out, _ = run(capsys, "train", "--data", word_dir, "--ckpt-out", again, "--epochs", 2, *TRAIN)
    assert out.splitlines()[:2] == log.splitlines()[:2]
    assert again.read_bytes() == ckpt.read_bytes()


def test_eval_rejects_mismatched_checkpoint(capsys, tmp_path, trained):
    ckpt, _ = trained
    run(capsys, "gen", "--task", "count", "--out", tmp_path / "count", *GEN[:2], "--dim", 8,
        "--samples", 4, "--test-samples", 2)
    assert run(capsys, "eval", "--data", tmp_path / "count", "--ckpt", ckpt)[0] == 2
    run(capsys, "gen", "--task", "word", "--out", tmp_path / "wide", "--dim", 6, "--samples", 4)
    assert run(capsys, "eval", "--data", tmp_path / "wide", "--ckpt", ckpt)[0] == 2
    assert run(capsys, "eval", "--data", tmp_path / "missing", "--ckpt", ckpt)[0] == 2


def test_dump_attention(capsys, tmp_path, trained, word_dir):
    ckpt, _ = trained
    args = ["dump-attention", "--data", word_dir, "--ckpt", ckpt, "--sample", 3]
    assert run(capsys, *args, "--out", tmp_path / "a.json")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b.json")[0] == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["sample"] == 3 and doc["n_steps"] == 3
    steps = doc["traces"][0]["steps"]
    assert [s["step"] for s in steps] == [1, 2, 3]
    for s in steps:
        for key in ("att_c", "att_v", "att_q", "alpha"):
            assert abs(sum(s[key]) - 1) <= 1e-6 and min(s[key]) >= 0
        assert len(s["alpha"]) == 3
    assert run(capsys, "dump-attention", "--data", word_dir, "--ckpt", ckpt, "--sample", 999,
               "--out", tmp_path / "c.json")[0] == 2


def oracle_count_model(dim):
    """Hand-set weights that read the count straight off the caption marker row."""
    pattern, marker, direction = count_codebook(0, dim)
    model = Model(ModelConfig(task="number", d=dim, d_c=dim, d_v=dim, d_q=dim))
    for p in model.params():
        p.data = np.zeros_like(p.data)
    d_perp = direction - (direction @ marker) / (marker @ marker) * marker
    m_perp = marker - (marker @ direction) / (direction @ direction) * direction
    eps, beta = 1e-3, 10.0
    g = model.gru["c"]
    g.b_z.data[:] = -30.0  # update gate shut: each state depends on its own row only
    g.W_n.data[0] = eps * d_perp  # linear readout of k / 10
    g.W_n.data[1] = beta * m_perp / (m_perp @ marker)  # saturates on the marker row only
    att = model.readout["c"]
    att.W_feat.data[0, 1] = 1.0
    att.w.data[0, 0] = 60.0
    model.head.W.data[0, 0] = 10.0 / (eps * (d_perp @ direction))
    return model


def test_perfect_oracle_count_checkpoint(capsys, tmp_path):
    ds = gen_count_task(5, 60, noise=0.0, n_test=40)
    save_dataset(ds, tmp_path / "count")
    oracle_count_model(32).save(tmp_path / "oracle.ckpt")
    code, out, _ = run(capsys, "eval", "--data", tmp_path / "count", "--ckpt", tmp_path / "oracle.ckpt")
    assert code == 0 and out.startswith("mse=0.0 ")
    assert set(ds.answers()) >= {0, 10}


def test_non_finite_training_keeps_last_good_checkpoint(capsys, tmp_path, word_dir, monkeypatch):
    good = tmp_path / "good.ckpt"
    run(capsys, "train", "--data", word_dir, "--ckpt-out", good, "--epochs", 1, *TRAIN)
    steps = {"n": 0}
    real_step = pipeline.Adam.step

    def poisoned(self):
        real_step(self)
        steps["n"] += 1
        if steps["n"] > 3:  # 40 samples / batch 16 = 3 steps per epoch
            self.params[0].data = self.params[0].data * np.nan

    monkeypatch.setattr(pipeline.Adam, "step", poisoned)
    ckpt = tmp_path / "m.ckpt"
    code, out, err = run(capsys, "train", "--data", word_dir, "--ckpt-out", ckpt, "--epochs", 3, *TRAIN)
    assert code == 3 and "non-finite" in err
    assert [kv(l)["epoch"] for l in out.splitlines() if l.startswith("epoch=")] == ["1"]
    assert ckpt.read_bytes() == good.read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_huge_learning_rate_exits_numeric(capsys, tmp_path, word_dir):
    code, _, err = run(capsys, "train", "--data", word_dir, "--ckpt-out", tmp_path / "m.ckpt", "--epochs", 3,
                       "--d", 8, "--batch-size", 16, "--lr", "1e300")
    assert code == 3 and (tmp_path / "m.ckpt").exists()


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--points", 5)
    assert code == 0 and "gradcheck passed" in out
    assert all("status=ok" in l for l in out.splitlines() if l.startswith("op="))


def test_gradcheck_catches_wrong_backward(capsys, monkeypatch):
    broken = dataclasses.replace(nk.PRIMITIVES["relu"], backward=lambda g, out, cache, a: (-g * (a > 0),))
    monkeypatch.setitem(nk.PRIMITIVES, "relu", broken)
    code, out, _ = run(capsys, "gradcheck", "--points", 5)
    assert code == 1
    assert re.search(r"FAIL worst offender: op relu", out)
