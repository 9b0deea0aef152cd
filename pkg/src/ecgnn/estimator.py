"""scikit-learn style wrapper around the model and training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import numkit as nk
from .pipeline import Model, ModelConfig, TrainConfig, _encode_inputs, _question_inputs, fit, predict, represent
from .encoders import gru_encode
from .validation import check_ablation, check_labelled, check_samples, check_seed, check_task


class EventGraphQA(BaseEstimator, TransformerMixin):
    """Video question answering over caption, video and question feature sequences.

    ``X`` is a sequence of :class:`~ecgnn.data.Sample` objects (or feature
    dicts with the same field names); ``y`` holds answers. ``transform``
    returns the final answer representation, one row per sample, or one
    ``(K, 3d)`` block per sample for the multiple-choice task.
    """

    def __init__(self, task="word", d=32, n_layers=3, n_steps=3, ablate=(), n_classes=None, n_choices=5,
                 lr=1e-4, batch_size=64, epochs=30, clip=None, random_state=0, threads=1, verbose=False):
        self.task = task
        self.d = d
        self.n_layers = n_layers
        self.n_steps = n_steps
        self.ablate = ablate
        self.n_classes = n_classes
        self.n_choices = n_choices
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip = clip
        self.random_state = random_state
        self.threads = threads
        self.verbose = verbose

    def _model_config(self, samples) -> ModelConfig:
        first = samples[0]
        widths = {}
        for key, name in (("d_c", "caption"), ("d_v", "video"), ("d_q", "question")):
            arr = getattr(first, name)
            if arr is not None:
                widths[key] = int(np.asarray(arr).shape[1])
        n_classes = self.n_classes
        if n_classes is None:
            n_classes = max(2, int(max(s.answer for s in samples)) + 1) if self.task == "word" else 4
        return ModelConfig(task=check_task(self.task), d=self.d, n_layers=self.n_layers, n_steps=self.n_steps,
                           ablate=check_ablation(self.ablate), n_classes=n_classes, n_choices=self.n_choices,
                           seed=check_seed(self.random_state), **widths)

    def fit(self, X, y=None):
        samples = check_samples(X, y)
        missing = [i for i, s in enumerate(samples) if s.answer is None]
        if missing:
            raise nk.ContractError(f"samples {missing[:5]} have no answer; pass y or labelled samples")
        cfg = self._model_config(samples)
        check_labelled(samples, cfg.task, n_classes=cfg.n_classes, n_choices=cfg.n_choices)
        self.model_ = Model(cfg)
        tc = TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, seed=cfg.seed, clip=self.clip)
        callback = (lambda e, m: print(f"epoch={e.epoch} loss={e.loss:.6f}")) if self.verbose else None
        self.history_ = fit(self.model_, samples, tc, on_epoch=callback)
        self.config_ = cfg
        return self

    def _check_fitted(self) -> Model:
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")
        return model

    def predict(self, X) -> np.ndarray:
        model = self._check_fitted()
        return predict(check_samples(X), model, self.threads)

    def transform(self, X) -> np.ndarray:
        model = self._check_fitted()
        out = []
        for s in check_samples(X):
            Fc, Fv = _encode_inputs(s, model)
            ctx_c = gru_encode(Fc, model.gru["c"]) if Fc is not None else None
            ctx_v = gru_encode(Fv, model.gru["v"]) if Fv is not None else None
            reps = [represent(model, ctx_c, ctx_v, Fq)[0].data for Fq in _question_inputs(s, model)]
            out.append(np.stack(reps) if model.config.task == "choice" else reps[0])
        return np.stack(out)

    def score(self, X, y=None) -> float:
        """Accuracy, or negative MSE for the number task (greater is better either way)."""
        samples = check_samples(X, y)
        pred = self.predict(samples).astype(np.float64)
        gold = np.array([s.answer for s in samples], dtype=np.float64)
        if self._check_fitted().config.task == "number":
            return -float(np.mean((pred - gold) ** 2))
        return float(np.mean(pred == gold))

    def parameters(self) -> list[nk.Param]:
        return self._check_fitted().params()
