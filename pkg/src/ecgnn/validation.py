"""Input checks shared by the estimator, the CLI and the data loader."""
from __future__ import annotations

from collections.abc import Iterable, Mapping

import numpy as np

from .data import TASKS, Dataset, Sample
from .heads import NUMBER_MAX, NUMBER_MIN
from .numkit import ConfigError, ContractError, ShapeError

_FEATURES = ("caption", "video", "question", "candidates", "appearance", "motion")


def check_task(task: str) -> str:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    return task


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer, str)):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    try:
        value = int(seed)
    except ValueError:
        raise ConfigError(f"seed must be an integer, got {seed!r}") from None
    if value < 0:
        raise ConfigError(f"seed must be non-negative, got {value}")
    return value


def check_ablation(flags) -> tuple[str, ...]:
    """Normalise ``"cap,cmr"``, a list of names, or ``None`` to a sorted tuple."""
    from .pipeline import ABLATIONS

    if flags is None:
        return ()
    if isinstance(flags, str):
        flags = [f for f in flags.split(",") if f]
    out = tuple(sorted(set(flags)))
    bad = [f for f in out if f not in ABLATIONS]
    if bad:
        raise ConfigError(f"unknown ablation(s) {bad}; expected from {ABLATIONS}")
    return out


def check_features(name: str, arr, width: int | None = None) -> np.ndarray:
    """A finite 2-D float64 matrix with at least one row (and ``width`` columns if given)."""
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {out.shape}")
    if width is not None and out.shape[1] != width:
        raise ShapeError(f"{name} has width {out.shape[1]}, expected {width}")
    if not np.all(np.isfinite(out)):
        raise ContractError(f"{name} contains non-finite values")
    return out


def check_answer(task: str, answer, *, n_classes: int = 0, n_choices: int = 0) -> int:
    a = int(answer)
    if task == "word" and not 0 <= a < n_classes:
        raise ContractError(f"word answer {a} outside [0, {n_classes})")
    if task == "number" and not NUMBER_MIN <= a <= NUMBER_MAX:
        raise ContractError(f"count answer {a} outside [{NUMBER_MIN}, {NUMBER_MAX}]")
    if task == "choice" and not 0 <= a < n_choices:
        raise ContractError(f"choice answer {a} outside [0, {n_choices})")
    return a


def as_sample(item) -> Sample:
    if isinstance(item, Sample):
        return item
    if isinstance(item, Mapping):
        unknown = set(item) - set(_FEATURES) - {"answer", "caption_tokens", "question_tokens",
                                                 "candidate_tokens", "split", "meta"}
        if unknown:
            raise ContractError(f"unknown sample fields {sorted(unknown)}")
        fields = dict(item)
        for name in _FEATURES:
            if fields.get(name) is not None:
                fields[name] = check_features(name, fields[name])
        fields.setdefault("answer", None)
        return Sample(**fields)
    raise ContractError(f"expected a Sample or a mapping of features, got {type(item).__name__}")


def check_samples(X, y=None) -> list[Sample]:
    """Coerce ``X`` (Dataset, Samples or feature dicts) to Samples, with answers from ``y`` if given."""
    if isinstance(X, Dataset):
        X = X.samples
    if not isinstance(X, Iterable) or isinstance(X, (str, bytes, np.ndarray)):
        raise ContractError("X must be a sequence of samples")
    samples = [as_sample(x) for x in X]
    if not samples:
        raise ContractError("X is empty")
    if y is not None:
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(samples):
            raise ShapeError(f"y has shape {y.shape}, expected ({len(samples)},)")
        samples = [Sample(**{**s.__dict__, "answer": int(a)}) for s, a in zip(samples, y)]
    return samples


def check_labelled(samples: list[Sample], task: str, *, n_classes: int = 0, n_choices: int = 0) -> None:
    for i, s in enumerate(samples):
        if s.answer is None:
            raise ContractError(f"sample {i} has no answer; pass y or labelled samples")
        check_answer(task, s.answer, n_classes=n_classes, n_choices=n_choices)
        if task == "choice" and s.n_candidates != n_choices:
            raise ShapeError(f"sample {i} has {s.n_candidates} candidates, expected {n_choices}")
