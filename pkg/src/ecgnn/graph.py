"""Intra-modal reasoning on fully connected modality graphs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Param, ShapeError, Tensor
from .params import ParamGroup, glorot, ones, zeros
from .probe import emit

LN_EPS = 1e-5


@dataclass
class GraphLayerParams(ParamGroup):
    """phi = tanh(W_phi x + b_phi); graph convolution matrix W; per-node layer norm."""

    W_phi: Param
    b_phi: Param
    W: Param
    ln_gain: Param
    ln_bias: Param

    @classmethod
    def init(cls, name: str, d: int, rng: np.random.Generator) -> "GraphLayerParams":
        return cls(
            glorot(rng, f"{name}.W_phi", (d, d)),
            zeros(f"{name}.b_phi", (d,)),
            glorot(rng, f"{name}.W", (d, d)),
            ones(f"{name}.ln_gain", (d,)),
            zeros(f"{name}.ln_bias", (d,)),
        )


def adjacency_logits(X, p: GraphLayerParams) -> Tensor:
    phi = nk.tanh(nk.affine(X, p.W_phi, p.b_phi))
    return nk.matmul(phi, nk.transpose(phi))


def adjacency(X, p: GraphLayerParams) -> Tensor:
    """Row-stochastic similarity adjacency softmax(phi(X) phi(X)^T)."""
    G = nk.softmax_rows(adjacency_logits(X, p))
    emit("adjacency", G.data)
    return G


def gcn_update(X, G, p: GraphLayerParams) -> Tensor:
    X, G = nk.as_tensor(X), nk.as_tensor(G)
    n = X.shape[0]
    if G.shape != (n, n):
        raise ShapeError(f"adjacency {G.shape} does not match {n} nodes")
    agg = nk.matmul(nk.matmul(G, X), p.W)
    return nk.relu(nk.layer_norm(agg, p.ln_gain, p.ln_bias, eps=LN_EPS))


def graph_reason(X, p: GraphLayerParams) -> Tensor:
    X = nk.as_tensor(X)
    return gcn_update(X, adjacency(X, p), p)
