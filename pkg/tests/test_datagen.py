import hashlib
import json

import numpy as np
import pytest

from ecgnn.datagen import (ManifestError, Sizes, count_codebook, gen_choice_task, gen_count_task, gen_word_task,
                           generate, label_uniformity, load_dataset, mean_predictor_mse, oracle_predictions,
                           save_dataset, word_codebook)


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.mark.parametrize("task", ["word", "count", "choice"])
def test_noise_free_oracle_is_exact(task):
    ds = generate(task, 4, 200, noise=0.0)
    assert np.array_equal(oracle_predictions(ds), ds.answers())


@pytest.mark.parametrize("task", ["word", "count", "choice"])
def test_oracle_strong_at_default_noise(task):
    ds = generate(task, 5, 300)
    assert np.mean(oracle_predictions(ds) == ds.answers()) > 0.9


def test_word_planted_row_carries_the_class():
    codes, keys = word_codebook(0, 4, 32)
    ds = gen_word_task(1, 50, noise=0.0)
    for s in ds:
        row = s.meta["planted_row"]
        assert np.allclose(s.caption[row], keys[s.meta["event_key"]] + codes[s.answer], atol=1e-6)
        others = np.delete(s.caption, row, axis=0)
        assert np.allclose(np.abs(others), 0.5, atol=1e-6)
        assert np.allclose(s.question, keys[s.meta["event_key"]], atol=1e-6)


def test_label_uniformity():
    stat, p = label_uniformity(gen_word_task(2, 4000))
    counts = np.bincount(gen_word_task(2, 4000).answers(), minlength=4)
    assert stat == pytest.approx(((counts - 1000) ** 2 / 1000).sum())
    assert p > 0.01


def test_mean_predictor_mse_is_label_variance():
    ds = gen_count_task(3, 3000)
    assert mean_predictor_mse(ds) == pytest.approx(np.var(ds.answers()))
    assert abs(mean_predictor_mse(ds) - 10.0) < 0.8  # uniform on 0..10 has variance 10


def test_count_extremes():
    pattern, marker, direction = count_codebook(0, 32)
    ds = gen_count_task(7, 400, noise=0.0)
    ks = ds.answers()
    assert ks.min() == 0 and ks.max() == 10
    for s in ds:
        k = s.answer
        assert len(s.video) >= max(8, k) and len(s.meta["event_frames"]) == k
        assert np.allclose(s.caption[s.meta["planted_row"]], marker + k / 10 * direction, atol=1e-6)
        if k == 0:
            assert np.allclose(s.video, 0)
        if k == 10:
            assert np.allclose(s.video[s.meta["event_frames"]], pattern, atol=1e-6)


def test_count_needs_room_for_ten_frames():
    with pytest.raises(ValueError):
        gen_count_task(0, 5, Sizes((2, 3), (2, 9), (2, 3)))


def test_choice_structure():
    ds = gen_choice_task(3, 60)
    assert ds.n_choices == 5
    for s in ds:
        assert s.candidates.shape == (5, 32)
        opts = [tuple(o) for o in s.meta["options"]]
        assert len(set(opts)) == 5 and opts[s.answer] == tuple(s.meta["transition"])
    assert set(ds.answers()) == set(range(5))


def test_sizes_respected():
    sz = Sizes((2, 3), (10, 11), (4, 4))
    for s in gen_word_task(0, 40, sz):
        assert 2 <= len(s.caption) <= 3 and 10 <= len(s.video) <= 11 and len(s.question) == 4
    assert Sizes.parse("2-3,10-11,4-4") == sz
    with pytest.raises(ValueError):
        Sizes.parse("3-2,1-1,1-1")


def test_splits():
    ds = gen_word_task(0, 20, n_test=5)
    # n_test samples come on top of the n_samples training samples
    assert len(ds.split("train")) == 20 and len(ds.split("test")) == 5 and ds[-1].split == "test"


def test_same_seed_byte_identical(tmp_path):
    a = save_dataset(gen_choice_task(11, 30, n_test=6), tmp_path / "a")
    b = save_dataset(gen_choice_task(11, 30, n_test=6), tmp_path / "b", threads=4)
    assert tree_digest(a) == tree_digest(b)
    c = save_dataset(gen_choice_task(12, 30, n_test=6), tmp_path / "c")
    assert tree_digest(a) != tree_digest(c)


@pytest.mark.parametrize("task", ["word", "count", "choice"])
def test_save_load_round_trip(tmp_path, task):
    ds = generate(task, 1, 15, n_test=4)
    back = load_dataset(save_dataset(ds, tmp_path / "d"))
    assert back.task == ds.task and back.dims == ds.dims and len(back) == len(ds)
    assert (back.n_classes, back.n_choices) == (ds.n_classes, ds.n_choices)
    for s, t in zip(ds, back):
        assert s.answer == t.answer and s.split == t.split and s.meta == t.meta
        assert np.array_equal(s.caption, t.caption) and np.array_equal(s.question, t.question)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["format"] == "ecgnn-dataset" and manifest["counts"]["test"] == 4 == len(back.split("test"))


def test_refuses_to_overwrite(tmp_path):
    save_dataset(gen_word_task(0, 3), tmp_path / "d")
    with pytest.raises(FileExistsError):
        save_dataset(gen_word_task(0, 3), tmp_path / "d")
    save_dataset(gen_word_task(1, 4), tmp_path / "d", force=True)
    assert len(load_dataset(tmp_path / "d")) == 4


def corrupt(tmp_path, edit):
    root = save_dataset(gen_word_task(0, 4), tmp_path / "d")
    path = root / "manifest.json"
    m = json.loads(path.read_text())
    edit(m, root)
    path.write_text(json.dumps(m))
    return root


@pytest.mark.parametrize("edit", [
    lambda m, r: m.update(format="other"),
    lambda m, r: m["samples"][0].update(answer=9),
    lambda m, r: m["counts"].update(samples=99),
    lambda m, r: m["dims"].update(d_c=7),
    lambda m, r: (r / m["samples"][1]["features"]["video"]).unlink(),
    lambda m, r: (r / m["samples"][1]["features"]["video"]).write_bytes(b"ECGF\x01"),
    lambda m, r: m["samples"][0]["features"].update(sound="tensors/x.ecgf"),
])
def test_manifest_validation(tmp_path, edit):
    with pytest.raises(ManifestError):
        load_dataset(corrupt(tmp_path, edit))


def test_missing_or_broken_manifest(tmp_path):
    with pytest.raises(ManifestError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{")
    with pytest.raises(ManifestError):
        load_dataset(tmp_path)


def test_unknown_task():
    with pytest.raises(ValueError):
        generate("sound", 0, 3)
