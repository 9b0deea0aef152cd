"""Contextual encoders: GRUs over each modality, caption sentence encoder, visual projection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit as nk
from .numkit import ContractError, Param, ShapeError, Tensor
from .params import ParamGroup, glorot, zeros


@dataclass
class GruParams(ParamGroup):
    W_z: Param
    W_r: Param
    W_n: Param
    U_z: Param
    U_r: Param
    U_n: Param
    b_z: Param
    b_r: Param
    b_n: Param

    @classmethod
    def init(cls, name: str, d_in: int, d_h: int, rng: np.random.Generator) -> "GruParams":
        mats = {f"W_{g}": glorot(rng, f"{name}.W_{g}", (d_h, d_in)) for g in "zrn"}
        mats.update({f"U_{g}": glorot(rng, f"{name}.U_{g}", (d_h, d_h)) for g in "zrn"})
        mats.update({f"b_{g}": zeros(f"{name}.b_{g}", (d_h,)) for g in "zrn"})
        return cls(**mats)

    @property
    def d_in(self) -> int:
        return self.W_z.shape[1]

    @property
    def d_h(self) -> int:
        return self.W_z.shape[0]


@dataclass
class VisualProjParams(ParamGroup):
    W1: Param
    b1: Param
    W2: Param
    b2: Param

    @classmethod
    def init(cls, name: str, d_a: int, d_m: int, d_hid: int, d_v: int, rng) -> "VisualProjParams":
        return cls(
            glorot(rng, f"{name}.W1", (d_hid, d_a + d_m)),
            zeros(f"{name}.b1", (d_hid,)),
            glorot(rng, f"{name}.W2", (d_v, d_hid)),
            zeros(f"{name}.b2", (d_v,)),
        )


@dataclass
class EmbeddingTable(ParamGroup):
    """Word table shared by questions and captions."""

    table: Param

    @classmethod
    def init(cls, name: str, vocab: int, dim: int, rng) -> "EmbeddingTable":
        return cls(Param(f"{name}.table", rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab, dim))))

    def lookup(self, ids: Sequence[int]) -> Tensor:
        return nk.gather_rows(self.table, ids=tuple(int(i) for i in ids))


@dataclass
class ContextualFeatures:
    C1: Tensor | None
    V1: Tensor | None
    Q1: Tensor
    c_last: Tensor | None
    v_last: Tensor | None
    q_last: Tensor


def gru_encode(seq, p: GruParams, h0=None) -> tuple[Tensor, Tensor]:
    """Run the GRU over the rows of ``seq``; returns (all states, last state)."""
    seq = nk.as_tensor(seq)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ContractError(f"gru_encode needs a non-empty (T, d_in) sequence, got shape {seq.shape}")
    if h0 is None:
        h0 = np.zeros(p.d_h)
    states = nk.gru_sequence(seq, h0, p.W_z, p.W_r, p.W_n, p.U_z, p.U_r, p.U_n, p.b_z, p.b_r, p.b_n)
    return states, states[-1]


def encode_caption_set(captions: Sequence[Sequence[int]], emb: EmbeddingTable, p: GruParams) -> Tensor:
    """Encode each caption to its last GRU state; rows follow caption order."""
    if not captions:
        raise ContractError("caption set is empty")
    rows = []
    for i, cap in enumerate(captions):
        if len(cap) == 0:
            raise ContractError(f"caption {i} is empty")
        _, last = gru_encode(emb.lookup(cap), p)
        rows.append(last)
    return nk.stack_rows(rows)


def visual_project(Fa, Fm, p: VisualProjParams) -> Tensor:
    Fa, Fm = nk.as_tensor(Fa), nk.as_tensor(Fm)
    if Fa.shape[0] != Fm.shape[0]:
        raise ShapeError(f"appearance has {Fa.shape[0]} frames but motion has {Fm.shape[0]}")
    hidden = nk.relu(nk.affine(nk.concat([Fa, Fm], axis=1), p.W1, p.b1))
    return nk.affine(hidden, p.W2, p.b2)


def contextualize(Fc, Fv, Fq, pc: GruParams | None, pv: GruParams | None, pq: GruParams) -> ContextualFeatures:
    """Encode the three modalities independently.

    A modality whose features or params are ``None`` is left out
    (used by the modality ablations).
    """
    C1 = c_last = V1 = v_last = None
    if Fc is not None and pc is not None:
        C1, c_last = gru_encode(Fc, pc)
    if Fv is not None and pv is not None:
        V1, v_last = gru_encode(Fv, pv)
    Q1, q_last = gru_encode(Fq, pq)
    return ContextualFeatures(C1, V1, Q1, c_last, v_last, q_last)
