"""Model assembly, forward pass, Adam training loop, evaluation and checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numkit as nk
from .crossmodal import CmrParams, cross_modal_round
from .data import TASKS, Dataset, Sample
from .encoders import EmbeddingTable, GruParams, VisualProjParams, encode_caption_set, gru_encode, visual_project
from .fusion import (FusionParams, FusionTrace, MeanPoolParams, final_representation, fuse, init_readout,
                     mean_pool_fusion)
from .graph import GraphLayerParams, graph_reason
from .heads import (ScalarHeadParams, WordHeadParams, argmax_first, choice_head, number_head, number_prediction,
                    word_head)
from .numkit import ConfigError, ContractError, Param, ShapeError
from .params import collect_params
from .tensorfile import atomic_write_bytes, decode_checkpoint, encode_checkpoint

log = logging.getLogger(__name__)

ABLATIONS = ("cap", "vid", "cmr", "qmmf", "mmf")


class NumericalError(RuntimeError):
    """A non-finite loss was produced during training."""


@dataclass
class ModelConfig:
    """Dimensions and structure.

    ``d_a``/``d_m`` > 0 switches the video input to appearance+motion through
    the two-layer projection; ``vocab_size`` > 0 switches captions and
    questions to token ids through a shared embedding of width ``d_q``.
    """

    task: str = "word"
    d: int = 32
    d_c: int = 32
    d_v: int = 32
    d_q: int = 32
    d_a: int = 0
    d_m: int = 0
    vocab_size: int = 0
    n_classes: int = 4
    n_choices: int = 5
    n_layers: int = 3
    cmr_after: tuple[int, ...] = (1, 2)
    n_steps: int = 3
    ablate: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        self.cmr_after = tuple(int(x) for x in self.cmr_after)
        self.ablate = tuple(sorted(set(self.ablate)))
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation(s) {bad}; expected from {ABLATIONS}")
        if self.n_layers < 1 or self.n_steps < 1:
            raise ConfigError("n_layers and n_steps must be positive")
        if any(not 1 <= l < self.n_layers for l in self.cmr_after):
            raise ConfigError(f"cross-modal rounds {self.cmr_after} must sit between graph layers 1..{self.n_layers}")
        if self.task == "word" and self.n_classes < 2:
            raise ConfigError("word task needs n_classes >= 2")
        if self.task == "choice" and self.n_choices < 2:
            raise ConfigError("choice task needs n_choices >= 2")

    @classmethod
    def reference(cls, task: str = "word", vocab_size: int = 1000, **kw) -> "ModelConfig":
        """Reference dimensions: 512-wide contextual features, ResNet/C3D/GloVe input widths."""
        base = dict(d=512, d_c=512, d_a=2048, d_m=4096, d_v=4096, d_q=300, vocab_size=vocab_size)
        base.update(kw)
        return cls(task=task, **base)

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m, flag in (("c", "cap"), ("v", "vid"), ("q", None)) if flag not in self.ablate)

    @property
    def raw_video(self) -> bool:
        return self.d_a > 0 and self.d_m > 0

    @property
    def tokens(self) -> bool:
        return self.vocab_size > 0

    @property
    def rep_width(self) -> int:
        return 3 * self.d

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["cmr_after"] = list(self.cmr_after)
        out["ablate"] = list(self.ablate)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)


def param_count_formula(cfg: ModelConfig) -> int:
    """Closed-form trainable scalar count for ``cfg``.

    GRU(i, h) = 3h(i + h + 1); graph layer = 2d^2 + 3d; cross-modal block =
    9d^2 + 4d; temporal attention = 3d^2 + 2d; modality mix = 10d^2 + 13d;
    LSTM(d) = 8d^2 + 4d; mean-pool fusion = 3d^2 + d.
    """
    d = cfg.d
    mods = cfg.modalities
    gru = lambda i, h: 3 * h * (i + h + 1)
    in_dim = {"c": cfg.d_c, "v": cfg.d_v, "q": cfg.d_q}
    total = sum(gru(in_dim[m], d) for m in mods)
    if cfg.tokens:
        total += cfg.vocab_size * cfg.d_q
        if "c" in mods:
            total += gru(cfg.d_q, cfg.d_c)
    if cfg.raw_video and "v" in mods:
        total += (cfg.d_a + cfg.d_m) * cfg.d_v + cfg.d_v + cfg.d_v * cfg.d_v + cfg.d_v
    total += len(mods) * cfg.n_layers * (2 * d * d + 3 * d)
    if "cmr" not in cfg.ablate:
        total += len(cfg.cmr_after) * len(mods) * (9 * d * d + 4 * d)
    if "qmmf" in cfg.ablate:
        total += 3 * d * d + d
    else:
        total += len(mods) * (3 * d * d + 2 * d) + (10 * d * d + 13 * d) + (8 * d * d + 4 * d)
    total += sum(1 for m in mods if m in "cv") * (3 * d * d + 2 * d)
    if cfg.task == "word":
        total += cfg.n_classes * (3 * d + 1)
    else:
        total += 3 * d + 1
    return total


class Model:
    """All parameters of one EC-GNN instance for a single task."""

    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        d, mods = cfg.d, cfg.modalities
        in_dim = {"c": cfg.d_c, "v": cfg.d_v, "q": cfg.d_q}
        self.gru = {m: GruParams.init(f"encoder.gru_{m}", in_dim[m], d, rng) for m in mods}
        self.embedding = EmbeddingTable.init("encoder.embedding", cfg.vocab_size, cfg.d_q, rng) if cfg.tokens else None
        self.caption_gru = (GruParams.init("encoder.caption_sentence", cfg.d_q, cfg.d_c, rng)
                            if cfg.tokens and "c" in mods else None)
        self.visual = (VisualProjParams.init("encoder.visual", cfg.d_a, cfg.d_m, cfg.d_v, cfg.d_v, rng)
                       if cfg.raw_video and "v" in mods else None)
        self.graph = {m: [GraphLayerParams.init(f"graph.{m}{l + 1}", d, rng) for l in range(cfg.n_layers)]
                      for m in mods}
        self.cmr = []
        if "cmr" not in cfg.ablate:
            self.cmr = [{m: CmrParams.init(f"cmr{r}.{m}", d, rng) for m in mods} for r in cfg.cmr_after]
        self.fusion = None if "qmmf" in cfg.ablate else FusionParams.init("fusion", d, rng, mods)
        self.mean_pool = MeanPoolParams.init("fusion.mean_pool", d, rng) if "qmmf" in cfg.ablate else None
        self.readout = init_readout("readout", d, rng, mods)
        if cfg.task == "word":
            self.head = WordHeadParams.init("head.word", cfg.rep_width, cfg.n_classes, rng)
        else:
            self.head = ScalarHeadParams.init(f"head.{cfg.task}", cfg.rep_width, rng)
        self._params = self._collect()

    def _collect(self) -> list[Param]:
        groups = [self.gru, self.embedding, self.caption_gru, self.visual, self.graph, self.cmr,
                  self.fusion, self.mean_pool, self.readout, self.head]
        out: list[Param] = []
        for g in groups:
            if g is not None:
                collect_params(g, out)
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names")
        if len({id(p) for p in out}) != len(out):
            raise RuntimeError("parameter registered twice")
        return out

    def params(self) -> list[Param]:
        return list(self._params)

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self._params}

    def n_scalars(self) -> int:
        return sum(p.size for p in self._params)

    def zero_grad(self) -> None:
        nk.zero_grad(self._params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self._params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_params()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in named.items():
            p.assign(state[name])

    def save(self, path) -> None:
        atomic_write_bytes(path, encode_checkpoint(self.config.to_dict(), self.state_dict()))

    @classmethod
    def load(cls, path) -> "Model":
        cfg, tensors = decode_checkpoint(Path(path).read_bytes())
        model = cls(ModelConfig.from_dict(cfg))
        model.load_state_dict(tensors)
        return model


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardResult:
    output: object  # WordOutput | NumberOutput | ChoiceOutput
    traces: list[FusionTrace]
    reps: list[nk.Tensor]

    @property
    def loss(self) -> nk.Tensor:
        return self.output.loss

    @property
    def prediction(self) -> int:
        return self.output.prediction


def _check_width(name: str, arr, width: int) -> None:
    if arr is None:
        raise ShapeError(f"sample lacks {name} features")
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.shape[1] != width or arr.shape[0] < 1:
        raise ShapeError(f"{name} features have shape {arr.shape}, expected (N>=1, {width})")


def _encode_inputs(sample: Sample, model: Model):
    """Per-modality input sequences, shared by every candidate of a multiple-choice sample."""
    cfg = model.config
    mods = cfg.modalities
    Fc = Fv = None
    if "c" in mods:
        if cfg.tokens:
            Fc = encode_caption_set(sample.caption_tokens or [], model.embedding, model.caption_gru)
        else:
            _check_width("caption", sample.caption, cfg.d_c)
            Fc = sample.caption
    if "v" in mods:
        if cfg.raw_video:
            _check_width("appearance", sample.appearance, cfg.d_a)
            _check_width("motion", sample.motion, cfg.d_m)
            Fv = visual_project(sample.appearance, sample.motion, model.visual)
        else:
            _check_width("video", sample.video, cfg.d_v)
            Fv = sample.video
    return Fc, Fv


def _question_inputs(sample: Sample, model: Model) -> list:
    cfg = model.config
    if cfg.tokens:
        base = list(sample.question_tokens or [])
        if cfg.task == "choice":
            return [model.embedding.lookup(base + list(c)) for c in sample.candidate_tokens]
        return [model.embedding.lookup(base)]
    _check_width("question", sample.question, cfg.d_q)
    if cfg.task == "choice":
        if sample.candidates is None or np.asarray(sample.candidates).shape[1:] != (cfg.d_q,):
            raise ShapeError(f"choice sample needs candidates of width {cfg.d_q}")
        q = np.asarray(sample.question)
        return [np.vstack([q, np.asarray(c)[None, :]]) for c in sample.candidates]
    return [sample.question]


def represent(model: Model, ctx_c, ctx_v, Fq) -> tuple[nk.Tensor, FusionTrace]:
    """Final representation s_a for one question sequence.

    ``ctx_c``/``ctx_v`` are (states, last) pairs from the caption/video GRUs
    (or ``None`` for an ablated modality).
    """
    cfg = model.config
    Q1, q_last = gru_encode(Fq, model.gru["q"])
    C1 = ctx_c[0] if ctx_c else None
    V1 = ctx_v[0] if ctx_v else None
    feats = {"c": C1, "v": V1, "q": Q1}
    for layer in range(1, cfg.n_layers + 1):
        hat = {m: (graph_reason(x, model.graph[m][layer - 1]) if x is not None else None) for m, x in feats.items()}
        if layer in cfg.cmr_after and model.cmr:
            r = cfg.cmr_after.index(layer)
            c, v, q = cross_modal_round(hat["c"], hat["v"], hat["q"], model.cmr[r])
            feats = {"c": c, "v": v, "q": q}
        else:
            feats = hat
    if model.fusion is None:
        h_final = mean_pool_fusion(feats["c"], feats["v"], feats["q"], model.mean_pool)
        trace = FusionTrace()
    else:
        h_final, trace = fuse(feats["c"], feats["v"], feats["q"], q_last, cfg.n_steps, model.fusion,
                              question_guided="mmf" not in cfg.ablate)
    s_a = final_representation(C1, V1, q_last, h_final, model.readout, trace)
    return s_a, trace


def forward(sample: Sample, model: Model) -> ForwardResult:
    cfg = model.config
    Fc, Fv = _encode_inputs(sample, model)
    ctx_c = gru_encode(Fc, model.gru["c"]) if Fc is not None else None
    ctx_v = gru_encode(Fv, model.gru["v"]) if Fv is not None else None
    reps, traces = [], []
    for Fq in _question_inputs(sample, model):
        s_a, trace = represent(model, ctx_c, ctx_v, Fq)
        reps.append(s_a)
        traces.append(trace)
    # unlabelled samples get a placeholder target; their loss is meaningless
    target = 0 if sample.answer is None else int(sample.answer)
    if cfg.task == "word":
        out = word_head(reps[0], model.head, target)
    elif cfg.task == "number":
        out = number_head(reps[0], model.head, target)
    else:
        out = choice_head(reps, model.head, target)
    return ForwardResult(out, traces, reps)


def predict_one(sample: Sample, model: Model) -> int:
    # predictions never look at the stored answer, even an out-of-range one
    return forward(dataclasses.replace(sample, answer=None), model).prediction


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip: float | None = None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        nk.zero_grad(self.params)

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if self.clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    clip: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EpochLog:
    epoch: int
    loss: float
    batch_losses: list[float] = field(default_factory=list)
    metric: float | None = None


def make_optimizer(model: Model, tc: TrainConfig) -> Adam:
    return Adam(model.params(), tc.lr, tc.beta1, tc.beta2, tc.eps, tc.clip)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(samples: Sequence[Sample], model: Model, opt: Adam, *, epoch: int = 0,
                seed: int = 0, batch_size: int = 64) -> EpochLog:
    """One pass of shuffled minibatches; each batch is one Adam step on the mean sample loss."""
    if len(samples) == 0:
        raise ContractError("cannot train on an empty dataset")
    if any(s.answer is None for s in samples):
        raise ContractError("training samples must carry answers")
    order = epoch_order(len(samples), seed, epoch)
    batch_losses, total = [], 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        opt.zero_grad()
        batch_sum = 0.0
        for i in idx:
            try:
                with nk.ExprGraph() as graph:
                    loss = nk.mul(forward(samples[int(i)], model).loss, 1.0 / len(idx))
            except nk.NonFiniteError as exc:
                raise NumericalError(f"non-finite activations on sample {int(i)} in epoch {epoch}: {exc}") from exc
            value = float(loss.data) * len(idx)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} on sample {int(i)} in epoch {epoch}")
            nk.backward(loss, graph)
            batch_sum += value
        opt.step()
        if not all(np.all(np.isfinite(p.data)) for p in opt.params):
            raise NumericalError(f"parameters became non-finite in epoch {epoch}")
        batch_losses.append(batch_sum / len(idx))
        total += batch_sum
    return EpochLog(epoch, total / len(samples), batch_losses)


def fit(model: Model, train: Sequence[Sample], tc: TrainConfig, *, eval_set: Sequence[Sample] | None = None,
        opt: Adam | None = None, on_epoch: Callable[[EpochLog, Model], None] | None = None) -> list[EpochLog]:
    opt = opt or make_optimizer(model, tc)
    logs = []
    for epoch in range(1, tc.epochs + 1):
        entry = train_epoch(train, model, opt, epoch=epoch, seed=tc.seed, batch_size=tc.batch_size)
        if eval_set is not None and len(eval_set):
            entry.metric = primary_metric(evaluate(eval_set, model), model.config.task)
        logs.append(entry)
        log.info("epoch=%d loss=%.6f metric=%s", epoch, entry.loss, entry.metric)
        if on_epoch is not None:
            on_epoch(entry, model)
    return logs


# ---------------------------------------------------------------------------
# evaluation


def primary_metric(metrics: dict, task: str) -> float:
    return metrics["mse"] if task == "number" else metrics["accuracy"]


def score_predictions(task: str, predictions, answers) -> dict:
    pred = np.asarray(predictions, dtype=np.float64)
    gold = np.asarray(answers, dtype=np.float64)
    if task == "number":
        return {"mse": float(np.mean((pred - gold) ** 2)), "n": int(len(gold))}
    return {"accuracy": float(np.mean(pred == gold)), "n": int(len(gold))}


def predict(samples: Sequence[Sample], model: Model, threads: int = 1) -> np.ndarray:
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            preds = list(pool.map(lambda s: predict_one(s, model), samples))
    else:
        preds = [predict_one(s, model) for s in samples]
    return np.asarray(preds, dtype=np.int64)


def evaluate(dataset: Sequence[Sample] | Dataset, model: Model, threads: int = 1) -> dict:
    if isinstance(dataset, Dataset) and dataset.task != model.config.task:
        raise ConfigError(f"dataset task {dataset.task!r} does not match model task {model.config.task!r}")
    samples = list(dataset)
    if not samples:
        raise ContractError("cannot evaluate on an empty dataset")
    preds = predict(samples, model, threads)
    return score_predictions(model.config.task, preds, [s.answer for s in samples])


__all__ = [
    "ABLATIONS", "Adam", "EpochLog", "ForwardResult", "Model", "ModelConfig", "NumericalError", "TrainConfig",
    "argmax_first", "evaluate", "fit", "forward", "make_optimizer", "number_prediction", "param_count_formula",
    "predict", "represent", "score_predictions", "train_epoch",
]
