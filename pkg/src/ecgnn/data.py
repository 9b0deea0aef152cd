"""In-memory QA samples and datasets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TASKS = ("word", "number", "choice")


@dataclass
class Sample:
    """One question-answer instance.

    Feature mode fills ``caption``/``video``/``question`` (and ``candidates``
    for multiple choice, one row per candidate in question-feature space).
    Raw mode instead fills ``appearance``/``motion`` and the token fields.
    """

    answer: int
    caption: np.ndarray | None = None
    video: np.ndarray | None = None
    question: np.ndarray | None = None
    candidates: np.ndarray | None = None
    appearance: np.ndarray | None = None
    motion: np.ndarray | None = None
    caption_tokens: list[list[int]] | None = None
    question_tokens: list[int] | None = None
    candidate_tokens: list[list[int]] | None = None
    split: str = "train"
    meta: dict = field(default_factory=dict)

    @property
    def n_candidates(self) -> int:
        if self.candidates is not None:
            return len(self.candidates)
        if self.candidate_tokens is not None:
            return len(self.candidate_tokens)
        return 0


@dataclass
class Dataset:
    task: str
    samples: list[Sample]
    n_classes: int = 0
    n_choices: int = 0
    dims: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def split(self, name: str) -> "Dataset":
        return Dataset(self.task, [s for s in self.samples if s.split == name],
                       self.n_classes, self.n_choices, dict(self.dims), dict(self.info))

    def answers(self) -> np.ndarray:
        return np.array([s.answer for s in self.samples], dtype=np.int64)
