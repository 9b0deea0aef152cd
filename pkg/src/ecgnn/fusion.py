"""Question-guided self-adaptive multi-modal fusion with an LSTM controller."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .numkit import ContractError, Param, Tensor
from .params import ParamGroup, glorot, zeros
from .probe import emit

MODALITIES = ("c", "v", "q")


@dataclass
class AttendParams(ParamGroup):
    """Additive temporal attention: w . tanh(W_q q + W_h h + W_feat f_i + b)."""

    w: Param
    W_q: Param
    W_h: Param
    W_feat: Param
    b: Param

    @classmethod
    def init(cls, name: str, d: int, rng) -> "AttendParams":
        return cls(
            glorot(rng, f"{name}.w", (1, d)),
            glorot(rng, f"{name}.W_q", (d, d)),
            glorot(rng, f"{name}.W_h", (d, d)),
            glorot(rng, f"{name}.W_feat", (d, d)),
            zeros(f"{name}.b", (d,)),
        )


@dataclass
class MixParams(ParamGroup):
    W_alpha: Param  # (3, 3d)
    W_c_alpha: Param
    W_v_alpha: Param
    W_q_alpha: Param
    W_h_alpha: Param  # (3d, d)
    b_alpha: Param  # (3d,)
    W_c_x: Param
    W_v_x: Param
    W_q_x: Param
    W_h_x: Param
    b_x: Param

    @classmethod
    def init(cls, name: str, d: int, rng) -> "MixParams":
        g = lambda tag, shape: glorot(rng, f"{name}.{tag}", shape)
        return cls(
            g("W_alpha", (3, 3 * d)),
            g("W_c_alpha", (d, d)), g("W_v_alpha", (d, d)), g("W_q_alpha", (d, d)),
            g("W_h_alpha", (3 * d, d)),
            zeros(f"{name}.b_alpha", (3 * d,)),
            g("W_c_x", (d, d)), g("W_v_x", (d, d)), g("W_q_x", (d, d)), g("W_h_x", (d, d)),
            zeros(f"{name}.b_x", (d,)),
        )


@dataclass
class LstmParams(ParamGroup):
    """Stacked gate weights in i, f, o, g order."""

    W: Param
    U: Param
    b: Param

    @classmethod
    def init(cls, name: str, d_in: int, d: int, rng) -> "LstmParams":
        return cls(
            glorot(rng, f"{name}.W", (4 * d, d_in)),
            glorot(rng, f"{name}.U", (4 * d, d)),
            zeros(f"{name}.b", (4 * d,)),
        )


@dataclass
class FusionParams(ParamGroup):
    attend: dict[str, AttendParams]
    mix: MixParams
    lstm: LstmParams

    @classmethod
    def init(cls, name: str, d: int, rng, modalities=MODALITIES) -> "FusionParams":
        attend = {m: AttendParams.init(f"{name}.attend_{m}", d, rng) for m in modalities}
        mix = MixParams.init(f"{name}.mix", d, rng)
        lstm = LstmParams.init(f"{name}.lstm", d, d, rng)
        return cls(attend, mix, lstm)


def init_readout(name: str, d: int, rng, modalities=MODALITIES) -> dict[str, AttendParams]:
    """Temporal attention params for the final caption/video readout."""
    return {m: AttendParams.init(f"{name}.{m}", d, rng) for m in ("c", "v") if m in modalities}


@dataclass
class FusionTrace:
    att_c: list[np.ndarray] = field(default_factory=list)
    att_v: list[np.ndarray] = field(default_factory=list)
    att_q: list[np.ndarray] = field(default_factory=list)
    alpha: list[np.ndarray] = field(default_factory=list)
    h: list[np.ndarray] = field(default_factory=list)
    final_c: np.ndarray | None = None
    final_v: np.ndarray | None = None

    def to_dict(self) -> dict:
        steps = []
        for t in range(len(self.alpha)):
            steps.append({
                "step": t + 1,
                "att_c": self.att_c[t].tolist() if self.att_c else [],
                "att_v": self.att_v[t].tolist() if self.att_v else [],
                "att_q": self.att_q[t].tolist() if self.att_q else [],
                "alpha": self.alpha[t].tolist(),
            })
        return {
            "steps": steps,
            "final_c": [] if self.final_c is None else self.final_c.tolist(),
            "final_v": [] if self.final_v is None else self.final_v.tolist(),
        }


def step_attend(feat, q_last, h_prev, p: AttendParams, question_guided: bool = True):
    """Attention distribution over the rows of ``feat`` and the pooled row."""
    feat = nk.as_tensor(feat)
    if feat.ndim != 2 or feat.shape[0] < 1:
        raise ContractError(f"step_attend needs a non-empty (N, d) matrix, got {feat.shape}")
    q = q_last if question_guided else np.zeros(p.W_q.shape[1])
    att = nk.additive_attention(feat, q, h_prev, p.w, p.W_q, p.W_h, p.W_feat, p.b)
    emit("temporal", att.data)
    return att, nk.matmul(att, feat)


def modality_mix(C_t, V_t, Q_t, h_prev, p: MixParams):
    """Modality weights alpha (3,) and the controller input x_t (d,)."""
    u = nk.concat([nk.matmul(p.W_c_alpha, C_t), nk.matmul(p.W_v_alpha, V_t), nk.matmul(p.W_q_alpha, Q_t)])
    u = nk.add(nk.add(u, nk.matmul(p.W_h_alpha, h_prev)), p.b_alpha)
    alpha = nk.softmax_rows(nk.matmul(p.W_alpha, nk.tanh(u)))
    emit("alpha", alpha.data)
    stacked = nk.stack_rows([nk.matmul(p.W_c_x, C_t), nk.matmul(p.W_v_x, V_t), nk.matmul(p.W_q_x, Q_t)])
    x = nk.tanh(nk.add(nk.add(nk.matmul(alpha, stacked), nk.matmul(p.W_h_x, h_prev)), p.b_x))
    return alpha, x


def lstm_step(x, state, p: LstmParams):
    h, c = state
    out = nk.lstm_cell(x, h, c, p.W, p.U, p.b)
    return out[0], out[1]


def fuse(C3, V3, Q3, q_last, n_steps: int, p: FusionParams, question_guided: bool = True):
    """Run ``n_steps`` reasoning steps; returns the final controller state and the trace.

    ``C3``/``V3`` may be ``None`` when that modality is ablated; its attended
    vector is then a constant zero.
    """
    if n_steps < 1:
        raise ContractError("fusion needs at least one reasoning step")
    d = p.mix.W_c_x.shape[0]
    h = nk.Tensor(np.zeros(d))
    c = nk.Tensor(np.zeros(d))
    trace = FusionTrace()
    feats = {"c": C3, "v": V3, "q": Q3}
    for _ in range(n_steps):
        pooled = {}
        for m in MODALITIES:
            if feats[m] is None:
                pooled[m] = nk.Tensor(np.zeros(d))
                continue
            att, pooled[m] = step_attend(feats[m], q_last, h, p.attend[m], question_guided)
            getattr(trace, f"att_{m}").append(att.data.copy())
        alpha, x = modality_mix(pooled["c"], pooled["v"], pooled["q"], h, p.mix)
        h, c = lstm_step(x, (h, c), p.lstm)
        trace.alpha.append(alpha.data.copy())
        trace.h.append(h.data.copy())
    return h, trace


def final_representation(C1, V1, q_last, h_final, readout: dict[str, AttendParams],
                         trace: FusionTrace | None = None) -> Tensor:
    """Temporal attention over C1 and V1 (conditioned on the final controller state),
    concatenated with that state: width 3d."""
    d = h_final.shape[0]
    parts = []
    for m, feat in (("c", C1), ("v", V1)):
        if feat is None:
            parts.append(nk.Tensor(np.zeros(d)))
            continue
        att, pooled = step_attend(feat, q_last, h_final, readout[m])
        if trace is not None:
            setattr(trace, f"final_{m}", att.data.copy())
        parts.append(pooled)
    parts.append(h_final)
    return nk.concat(parts)


@dataclass
class MeanPoolParams(ParamGroup):
    """Replacement fusion: tanh(W [mean C || mean V || mean Q] + b)."""

    W: Param
    b: Param

    @classmethod
    def init(cls, name: str, d: int, rng) -> "MeanPoolParams":
        return cls(glorot(rng, f"{name}.W", (d, 3 * d)), zeros(f"{name}.b", (d,)))


def mean_pool_fusion(C3, V3, Q3, p: MeanPoolParams) -> Tensor:
    d = p.W.shape[0]
    pooled = [nk.Tensor(np.zeros(d)) if f is None else nk.mean(f, axis=0) for f in (C3, V3, Q3)]
    return nk.tanh(nk.affine(nk.concat(pooled), p.W, p.b))
