"""Answer predictors and their losses for the three task kinds."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit as nk
from .numkit import ContractError, Param, Tensor
from .params import ParamGroup, glorot, zeros

NUMBER_MIN, NUMBER_MAX = 0, 10


@dataclass
class WordHeadParams(ParamGroup):
    W: Param
    b: Param

    @classmethod
    def init(cls, name: str, d_in: int, n_classes: int, rng) -> "WordHeadParams":
        if n_classes < 2:
            raise ContractError("word head needs at least two answer classes")
        return cls(glorot(rng, f"{name}.W", (n_classes, d_in)), zeros(f"{name}.b", (n_classes,)))


@dataclass
class ScalarHeadParams(ParamGroup):
    """Linear map to one scalar; used by the number and choice heads."""

    W: Param
    b: Param

    @classmethod
    def init(cls, name: str, d_in: int, rng) -> "ScalarHeadParams":
        return cls(glorot(rng, f"{name}.W", (1, d_in)), zeros(f"{name}.b", (1,)))


NumberHeadParams = ScalarHeadParams
ChoiceHeadParams = ScalarHeadParams


@dataclass
class WordOutput:
    probs: np.ndarray
    loss: Tensor
    prediction: int


@dataclass
class NumberOutput:
    raw: float
    loss: Tensor
    prediction: int


@dataclass
class ChoiceOutput:
    scores: np.ndarray
    loss: Tensor
    prediction: int


def argmax_first(values) -> int:
    """Index of the maximum; ties go to the lowest index."""
    return int(np.argmax(np.asarray(values)))


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def number_prediction(raw: float) -> int:
    return min(NUMBER_MAX, max(NUMBER_MIN, round_half_away(raw)))


def word_head(s_a, p: WordHeadParams, target: int) -> WordOutput:
    n_classes = p.b.shape[0]
    if not 0 <= target < n_classes:
        raise ContractError(f"target class {target} outside [0, {n_classes})")
    logp = nk.log_softmax(nk.affine(s_a, p.W, p.b))
    loss = nk.mul(logp[target], -1.0)
    probs = np.exp(logp.data)
    return WordOutput(probs, loss, argmax_first(logp.data))


def number_head(s_a, p: ScalarHeadParams, target: int) -> NumberOutput:
    if not NUMBER_MIN <= target <= NUMBER_MAX:
        raise ContractError(f"count target {target} outside [{NUMBER_MIN}, {NUMBER_MAX}]")
    raw = nk.affine(s_a, p.W, p.b)[0]
    loss = nk.square(nk.sub(raw, float(target)))
    value = float(raw.data)
    return NumberOutput(value, loss, number_prediction(value))


def choice_scores(reps: Sequence, p: ScalarHeadParams) -> list[Tensor]:
    return [nk.affine(r, p.W, p.b)[0] for r in reps]


def hinge_loss(scores: Sequence[Tensor], correct: int) -> Tensor:
    """Sum over wrong candidates of max(0, 1 + s_wrong - s_correct)."""
    terms = [
        nk.relu(nk.add(nk.sub(s, scores[correct]), 1.0))
        for i, s in enumerate(scores) if i != correct
    ]
    total = terms[0]
    for t in terms[1:]:
        total = nk.add(total, t)
    return total


def choice_head(reps: Sequence, p: ScalarHeadParams, correct: int) -> ChoiceOutput:
    if len(reps) < 2:
        raise ContractError("multiple choice needs at least two candidates")
    if not 0 <= correct < len(reps):
        raise ContractError(f"correct index {correct} outside [0, {len(reps)})")
    scores = choice_scores(reps, p)
    values = np.array([float(s.data) for s in scores])
    return ChoiceOutput(values, hinge_loss(scores, correct), argmax_first(values))
