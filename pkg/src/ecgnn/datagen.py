"""Synthetic planted-signal datasets and their on-disk layout.

A dataset directory holds ``manifest.json`` plus ``tensors/*.ecgf`` feature
files (see :mod:`ecgnn.tensorfile`). Feature values are rounded to float32
at generation time so the in-memory and on-disk datasets are identical.

Manifest fields::

    format        "ecgnn-dataset"
    version       1
    task          "word" | "number" | "choice"
    counts        {"samples", "train", "test", "classes" | "choices"}
    dims          {"d_c", "d_v", "d_q"}
    generator     {"name", "seed", "signal_seed", "noise", "sizes", ...}
    samples       list of {"id", "split", "answer", "features": {name: relative path},
                           "descriptor": {...}}
"""
from __future__ import annotations

import json
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .data import Dataset, Sample
from .heads import NUMBER_MAX
from .tensorfile import TensorFormatError, atomic_write_bytes, encode_tensor, read_tensor

FORMAT = "ecgnn-dataset"
FEATURE_FIELDS = ("caption", "video", "question", "candidates", "appearance", "motion")
GEN_TASKS = {"word": "word", "count": "number", "number": "number", "choice": "choice"}


class ManifestError(ValueError):
    """Manifest is malformed or disagrees with the tensor files."""


@dataclass(frozen=True)
class Sizes:
    """Inclusive (lo, hi) ranges for the caption, frame and question-word counts."""

    n_c: tuple[int, int] = (3, 8)
    n_v: tuple[int, int] = (8, 16)
    n_q: tuple[int, int] = (4, 10)

    @classmethod
    def parse(cls, text: str) -> "Sizes":
        """Parse ``"3-8,8-16,4-10"``."""
        try:
            parts = [tuple(int(v) for v in chunk.split("-")) for chunk in text.split(",")]
            if len(parts) != 3 or any(len(p) != 2 or p[0] < 1 or p[0] > p[1] for p in parts):
                raise ValueError
        except ValueError:
            raise ValueError(f"sizes must look like '3-8,8-16,4-10', got {text!r}") from None
        return cls(*parts)

    def to_list(self) -> list[list[int]]:
        return [list(self.n_c), list(self.n_v), list(self.n_q)]


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _signs(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape)


def _splits(n_samples: int, n_test: int) -> list[str]:
    return ["train"] * n_samples + ["test"] * n_test


# ---------------------------------------------------------------------------
# word task


def word_codebook(signal_seed: int, n_classes: int, dim: int, n_keys: int = 8):
    """Class codes and event keys shared by every sample generated with ``signal_seed``."""
    rng = np.random.default_rng([signal_seed, 1])
    return _signs(rng, (n_classes, dim)), _signs(rng, (n_keys, dim)) * 0.5


def gen_word_task(seed: int, n_samples: int, sizes: Sizes = Sizes(), n_classes: int = 4, *, dim: int = 32,
                  noise: float = 0.3, n_test: int = 0, signal_seed: int = 0) -> Dataset:
    """Open-ended word task whose answer is carried by one caption row only.

    Every caption row holds an event key plus noise; the planted row also
    holds the answer's class code. The question repeats the planted row's
    event key, and video rows are pure noise.
    """
    if n_classes < 2:
        raise ValueError("word task needs at least two classes")
    codes, keys = word_codebook(signal_seed, n_classes, dim)
    rng = np.random.default_rng(seed)
    samples = []
    for i, split in enumerate(_splits(n_samples, n_test)):
        answer = int(rng.integers(n_classes))
        n_c = int(rng.integers(sizes.n_c[0], sizes.n_c[1] + 1))
        n_v = int(rng.integers(sizes.n_v[0], sizes.n_v[1] + 1))
        n_q = int(rng.integers(sizes.n_q[0], sizes.n_q[1] + 1))
        row = int(rng.integers(n_c))
        key_ids = rng.permutation(len(keys))[:n_c] if n_c <= len(keys) else rng.integers(len(keys), size=n_c)
        caption = keys[key_ids] + noise * rng.standard_normal((n_c, dim))
        caption[row] += codes[answer]
        video = rng.standard_normal((n_v, dim))
        question = noise * rng.standard_normal((n_q, dim)) + keys[key_ids[row]]
        samples.append(Sample(answer, caption=_f32(caption), video=_f32(video), question=_f32(question),
                              split=split, meta={"planted_row": row, "event_key": int(key_ids[row])}))
    gen = dict(name="gen_word_task", seed=seed, signal_seed=signal_seed, noise=noise, sizes=sizes.to_list())
    return Dataset("word", samples, n_classes=n_classes, dims=_dims(dim), info=gen)


def _dims(dim: int) -> dict:
    return {"d_c": dim, "d_v": dim, "d_q": dim}


# ---------------------------------------------------------------------------
# count task


def count_codebook(signal_seed: int, dim: int):
    """Event pattern for video frames, caption marker and caption count direction."""
    rng = np.random.default_rng([signal_seed, 2])
    return _signs(rng, dim), _signs(rng, dim) * 0.5, _signs(rng, dim)


def gen_count_task(seed: int, n_samples: int, sizes: Sizes = Sizes(), *, dim: int = 32, noise: float = 0.3,
                   n_test: int = 0, signal_seed: int = 0) -> Dataset:
    """Open-ended number task: the answer is the number of event frames (0..10).

    One caption row restates the count as ``marker + (k / 10) * direction``.
    The frame count is drawn from ``[max(lo, k), hi]`` so that ``k`` event
    frames always fit.
    """
    if sizes.n_v[1] < NUMBER_MAX:
        raise ValueError(f"count task needs up to {NUMBER_MAX} frames, sizes allow {sizes.n_v[1]}")
    pattern, marker, direction = count_codebook(signal_seed, dim)
    rng = np.random.default_rng(seed)
    samples = []
    for split in _splits(n_samples, n_test):
        k = int(rng.integers(NUMBER_MAX + 1))
        n_v = int(rng.integers(max(sizes.n_v[0], k), sizes.n_v[1] + 1))
        n_c = int(rng.integers(sizes.n_c[0], sizes.n_c[1] + 1))
        n_q = int(rng.integers(sizes.n_q[0], sizes.n_q[1] + 1))
        frames = np.sort(rng.permutation(n_v)[:k])
        video = noise * rng.standard_normal((n_v, dim))
        video[frames] += pattern
        row = int(rng.integers(n_c))
        caption = noise * rng.standard_normal((n_c, dim))
        caption[row] += marker + (k / NUMBER_MAX) * direction
        question = noise * rng.standard_normal((n_q, dim)) + pattern * 0.5
        samples.append(Sample(k, caption=_f32(caption), video=_f32(video), question=_f32(question), split=split,
                              meta={"event_frames": [int(f) for f in frames], "planted_row": row}))
    gen = dict(name="gen_count_task", seed=seed, signal_seed=signal_seed, noise=noise, sizes=sizes.to_list())
    return Dataset("number", samples, dims=_dims(dim), info=gen)


# ---------------------------------------------------------------------------
# choice task


def choice_codebook(signal_seed: int, dim: int, n_states: int = 4):
    """Video state patterns, and candidate codes for the first and second state of a transition."""
    rng = np.random.default_rng([signal_seed, 3])
    return _signs(rng, (n_states, dim)), _signs(rng, (n_states, dim)), _signs(rng, (n_states, dim))


def transition_code(first_codes, second_codes, pair) -> np.ndarray:
    i, j = pair
    return 0.5 * (first_codes[i] + second_codes[j])


def gen_choice_task(seed: int, n_samples: int, sizes: Sizes = Sizes(), n_choices: int = 5, *, dim: int = 32,
                    noise: float = 0.3, n_test: int = 0, signal_seed: int = 0, n_states: int = 4) -> Dataset:
    """Multiple-choice transition task.

    The first half of the frames shows state ``i`` and the second half state
    ``j``; captions describe both states in order. The correct candidate
    encodes the ordered pair (i, j); distractors encode other ordered pairs
    of the same states.
    """
    pairs = [(i, j) for i in range(n_states) for j in range(n_states) if i != j]
    if n_choices > len(pairs):
        raise ValueError(f"{n_states} states give only {len(pairs)} transitions for {n_choices} choices")
    states, first, second = choice_codebook(signal_seed, dim, n_states)
    rng = np.random.default_rng(seed)
    samples = []
    for split in _splits(n_samples, n_test):
        true_pair = pairs[int(rng.integers(len(pairs)))]
        others = [p for p in pairs if p != true_pair]
        picks = [others[int(x)] for x in rng.permutation(len(others))[:n_choices - 1]]
        answer = int(rng.integers(n_choices))
        options = picks[:answer] + [true_pair] + picks[answer:]
        n_v = int(rng.integers(sizes.n_v[0], sizes.n_v[1] + 1))
        n_c = int(rng.integers(max(2, sizes.n_c[0]), max(2, sizes.n_c[1]) + 1))
        n_q = int(rng.integers(sizes.n_q[0], sizes.n_q[1] + 1))
        half = n_v // 2
        video = noise * rng.standard_normal((n_v, dim))
        video[:half] += states[true_pair[0]]
        video[half:] += states[true_pair[1]]
        caption = noise * rng.standard_normal((n_c, dim))
        c_half = n_c // 2
        caption[:c_half] += first[true_pair[0]]
        caption[c_half:] += second[true_pair[1]]
        question = noise * rng.standard_normal((n_q, dim))
        cands = np.stack([transition_code(first, second, p) for p in options])
        cands = cands + noise * rng.standard_normal(cands.shape)
        samples.append(Sample(answer, caption=_f32(caption), video=_f32(video), question=_f32(question),
                              candidates=_f32(cands), split=split,
                              meta={"transition": list(true_pair), "options": [list(p) for p in options]}))
    gen = dict(name="gen_choice_task", seed=seed, signal_seed=signal_seed, noise=noise, sizes=sizes.to_list(),
               n_states=n_states)
    return Dataset("choice", samples, n_choices=n_choices, dims=_dims(dim), info=gen)


def generate(task: str, seed: int, n_samples: int, sizes: Sizes = Sizes(), *, n_test: int = 0, dim: int = 32,
             noise: float = 0.3, n_classes: int = 4, n_choices: int = 5, signal_seed: int = 0) -> Dataset:
    kind = GEN_TASKS.get(task)
    common = dict(dim=dim, noise=noise, n_test=n_test, signal_seed=signal_seed)
    if kind == "word":
        return gen_word_task(seed, n_samples, sizes, n_classes, **common)
    if kind == "number":
        return gen_count_task(seed, n_samples, sizes, **common)
    if kind == "choice":
        return gen_choice_task(seed, n_samples, sizes, n_choices, **common)
    raise ValueError(f"unknown task {task!r}; expected one of {sorted(GEN_TASKS)}")


# ---------------------------------------------------------------------------
# closed-form oracles used by the self-tests


def oracle_predictions(ds: Dataset) -> np.ndarray:
    """Predictions of the generator's built-in probe (no learning involved)."""
    g = ds.info
    dim = ds.dims["d_c"]
    preds = []
    if ds.task == "word":
        codes, _ = word_codebook(g["signal_seed"], ds.n_classes, dim)
        for s in ds:
            row = s.caption[s.meta["planted_row"]]
            preds.append(int(np.argmax(codes @ row)))
    elif ds.task == "number":
        pattern, _, _ = count_codebook(g["signal_seed"], dim)
        for s in ds:
            hits = (s.video @ pattern) / dim > 0.5
            preds.append(int(hits.sum()))
    else:
        states, first, second = choice_codebook(g["signal_seed"], dim, g["n_states"])
        for s in ds:
            half = len(s.video) // 2
            i = int(np.argmax(states @ s.video[:half].mean(0)))
            j = int(np.argmax(states @ s.video[half:].mean(0)))
            target = transition_code(first, second, (i, j))
            preds.append(int(np.argmin(((s.candidates - target) ** 2).sum(1))))
    return np.asarray(preds, dtype=np.int64)


def label_uniformity(ds: Dataset) -> tuple[float, float]:
    """Chi-square statistic and p-value of the answer histogram against uniform."""
    n_bins = {"word": ds.n_classes, "choice": ds.n_choices, "number": NUMBER_MAX + 1}[ds.task]
    counts = np.bincount(ds.answers(), minlength=n_bins)
    res = stats.chisquare(counts)
    return float(res.statistic), float(res.pvalue)


def mean_predictor_mse(ds: Dataset) -> float:
    y = ds.answers().astype(np.float64)
    return float(np.mean((y - y.mean()) ** 2))


# ---------------------------------------------------------------------------
# disk I/O


def _sample_files(s: Sample) -> dict[str, np.ndarray]:
    return {name: getattr(s, name) for name in FEATURE_FIELDS if getattr(s, name) is not None}


def save_dataset(ds: Dataset, root, *, force: bool = False, threads: int = 1) -> Path:
    """Write ``ds`` under ``root``; the manifest is written last, atomically."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} exists and is not empty (use force to overwrite)")
        shutil.rmtree(root)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    entries, writes = [], []
    for idx, s in enumerate(ds.samples):
        files = {}
        for name, arr in _sample_files(s).items():
            rel = f"tensors/{idx:06d}_{name}.ecgf"
            writes.append((root / rel, arr))
            files[name] = rel
        entry = {"id": idx, "split": s.split, "answer": int(s.answer), "features": files, "descriptor": s.meta}
        for name in ("caption_tokens", "question_tokens", "candidate_tokens"):
            if getattr(s, name) is not None:
                entry[name] = getattr(s, name)
        entries.append(entry)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(lambda job: job[0].write_bytes(encode_tensor(job[1])), writes))
    else:
        for path, arr in writes:
            path.write_bytes(encode_tensor(arr))
    counts = {"samples": len(ds), "train": sum(s.split == "train" for s in ds),
              "test": sum(s.split == "test" for s in ds)}
    if ds.task == "word":
        counts["classes"] = ds.n_classes
    if ds.task == "choice":
        counts["choices"] = ds.n_choices
    manifest = {"format": FORMAT, "version": 1, "task": ds.task, "counts": counts, "dims": ds.dims,
                "generator": ds.info, "samples": entries}
    atomic_write_bytes(root / "manifest.json", (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return root


def load_dataset(root) -> Dataset:
    """Read and validate a dataset directory."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise ManifestError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise ManifestError(f"not an {FORMAT} manifest")
    task = manifest.get("task")
    counts, dims = manifest.get("counts", {}), manifest.get("dims", {})
    width = {"caption": dims.get("d_c"), "video": dims.get("d_v"), "question": dims.get("d_q"),
             "candidates": dims.get("d_q"), "appearance": dims.get("d_a"), "motion": dims.get("d_m")}
    n_classes = int(counts.get("classes", 0))
    n_choices = int(counts.get("choices", 0))
    samples = []
    for entry in manifest.get("samples", []):
        feats = {}
        for name, rel in entry.get("features", {}).items():
            if name not in FEATURE_FIELDS:
                raise ManifestError(f"sample {entry.get('id')}: unknown feature {name!r}")
            fpath = root / rel
            if not fpath.is_file():
                raise ManifestError(f"sample {entry.get('id')}: missing file {rel}")
            try:
                arr = read_tensor(fpath)
            except TensorFormatError as exc:
                raise ManifestError(f"sample {entry.get('id')}: {rel}: {exc}") from exc
            if arr.ndim != 2 or (width[name] is not None and arr.shape[1] != width[name]):
                raise ManifestError(f"sample {entry.get('id')}: {rel} has shape {arr.shape}, "
                                    f"declared width {width[name]}")
            feats[name] = arr
        s = Sample(int(entry["answer"]), split=entry.get("split", "train"), meta=entry.get("descriptor", {}),
                   caption_tokens=entry.get("caption_tokens"), question_tokens=entry.get("question_tokens"),
                   candidate_tokens=entry.get("candidate_tokens"), **feats)
        _validate_answer(task, s, n_classes, n_choices)
        samples.append(s)
    if len(samples) != counts.get("samples", len(samples)):
        raise ManifestError(f"manifest lists {len(samples)} samples but counts say {counts.get('samples')}")
    return Dataset(task, samples, n_classes=n_classes, n_choices=n_choices, dims=dims,
                   info=manifest.get("generator", {}))


def _validate_answer(task: str, s: Sample, n_classes: int, n_choices: int) -> None:
    if task == "word":
        ok = 0 <= s.answer < n_classes
    elif task == "number":
        ok = 0 <= s.answer <= NUMBER_MAX
    elif task == "choice":
        ok = 0 <= s.answer < n_choices and s.n_candidates == n_choices
    else:
        raise ManifestError(f"unknown task {task!r}")
    if not ok:
        raise ManifestError(f"answer {s.answer} invalid for {task} task")
