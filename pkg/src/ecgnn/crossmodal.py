"""Cross-modal attention and the cross-modal reasoning block."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Param, ShapeError, Tensor
from .params import ParamGroup, glorot, ones, zeros
from .probe import emit

LN_EPS = 1e-5

# for each target graph, the two source modalities in concatenation order
SOURCE_ORDER = {"v": ("q", "c"), "c": ("v", "q"), "q": ("v", "c")}


@dataclass
class CamOutput:
    attended: Tensor
    weights: Tensor


@dataclass
class CmrParams(ParamGroup):
    W_Q: Param
    W_K_a: Param
    W_V_a: Param
    W_K_b: Param
    W_V_b: Param
    ff1_W: Param
    ff1_b: Param
    ff2_W: Param
    ff2_b: Param
    ln_gain: Param
    ln_bias: Param

    @classmethod
    def init(cls, name: str, d: int, rng: np.random.Generator) -> "CmrParams":
        sq = lambda tag: glorot(rng, f"{name}.{tag}", (d, d))
        return cls(
            sq("W_Q"), sq("W_K_a"), sq("W_V_a"), sq("W_K_b"), sq("W_V_b"),
            glorot(rng, f"{name}.ff1_W", (d, 3 * d)), zeros(f"{name}.ff1_b", (d,)),
            glorot(rng, f"{name}.ff2_W", (d, d)), zeros(f"{name}.ff2_b", (d,)),
            ones(f"{name}.ln_gain", (d,)), zeros(f"{name}.ln_bias", (d,)),
        )


def _project(X: Tensor, W: Param) -> Tensor:
    return nk.linear(X, W)


def cam(M_Q, M_K, M_V) -> CamOutput:
    """softmax(M_Q M_K^T / sqrt(d)) M_V with d the key width."""
    M_Q, M_K, M_V = nk.as_tensor(M_Q), nk.as_tensor(M_K), nk.as_tensor(M_V)
    if M_K.shape[0] != M_V.shape[0]:
        raise ShapeError(f"cam: {M_K.shape[0]} keys but {M_V.shape[0]} values")
    if M_Q.shape[-1] != M_K.shape[-1]:
        raise ShapeError(f"cam: query width {M_Q.shape[-1]} != key width {M_K.shape[-1]}")
    scores = nk.mul(nk.matmul(M_Q, nk.transpose(M_K)), 1.0 / math.sqrt(M_K.shape[-1]))
    weights = nk.softmax_rows(scores)
    emit("cam", weights.data)
    return CamOutput(nk.matmul(weights, M_V), weights)


def cmr_block(target, src_a, src_b, p: CmrParams) -> Tensor:
    """LayerNorm(FF([cam_a || cam_b || target]) + target).

    A source given as ``None`` (ablated modality) contributes zero rows.
    """
    target = nk.as_tensor(target)
    d = p.W_Q.shape[0]
    for x in (target, src_a, src_b):
        if x is not None and nk.as_tensor(x).shape[-1] != d:
            raise ShapeError(f"cmr_block: feature width {nk.as_tensor(x).shape[-1]} != {d}")
    M_Q = _project(target, p.W_Q)
    parts = []
    for src, W_K, W_V in ((src_a, p.W_K_a, p.W_V_a), (src_b, p.W_K_b, p.W_V_b)):
        if src is None:
            parts.append(nk.Tensor(np.zeros(target.shape)))
        else:
            src = nk.as_tensor(src)
            parts.append(cam(M_Q, _project(src, W_K), _project(src, W_V)).attended)
    parts.append(target)
    hidden = nk.relu(nk.affine(nk.concat(parts, axis=1), p.ff1_W, p.ff1_b))
    ff = nk.affine(hidden, p.ff2_W, p.ff2_b)
    return nk.layer_norm(nk.add(ff, target), p.ln_gain, p.ln_bias, eps=LN_EPS)


def cross_modal_round(C, V, Q, params: dict[str, CmrParams]):
    """One round over all present graphs; ``None`` modalities stay ``None``."""
    feats = {"c": C, "v": V, "q": Q}
    out = {}
    for m in ("c", "v", "q"):
        if feats[m] is None:
            out[m] = None
            continue
        a, b = SOURCE_ORDER[m]
        out[m] = cmr_block(feats[m], feats[a], feats[b], params[m])
    return out["c"], out["v"], out["q"]
