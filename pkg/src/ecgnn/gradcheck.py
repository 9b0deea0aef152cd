"""Finite-difference sweep over every registered primitive and over a whole model.

Each primitive is exercised at ``n_points`` random points. A point is a fresh
random input instance, a random output projection ``L = sum(R * out)`` and
one randomly chosen input coordinate. Relu inputs are kept at least 0.1
away from its kink, where central differences are meaningless.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numkit as nk
from .numkit import CheckEntry, GradCheckReport, Param

OP_TOL = 1e-6
MODEL_TOL = 1e-3

Case = Callable[[np.random.Generator], tuple[list[np.ndarray], dict]]


def _n(rng, *shape, scale=1.0):
    return scale * rng.standard_normal(shape)


def _binary(rng):
    shapes = [((3, 4), (3, 4)), ((3, 4), (4,)), ((3, 4), (1, 4)), ((4,), (3, 4)), ((3, 1), (1, 4))]
    sa, sb = shapes[rng.integers(len(shapes))]
    return [_n(rng, *sa), _n(rng, *sb)], {}


def _matmul(rng):
    shapes = [((3, 4), (4, 5)), ((3, 4), (4,)), ((4,), (4, 5)), ((4,), (4,))]
    sa, sb = shapes[rng.integers(len(shapes))]
    return [_n(rng, *sa), _n(rng, *sb)], {}


def _reduce(rng):
    return [_n(rng, 3, 4)], {"axis": [None, 0, 1, -1][rng.integers(4)]}


def _kinked(rng):
    x = rng.uniform(0.1, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    return [x], {}


def _concat(rng):
    axis = int(rng.integers(2))
    parts = [_n(rng, 2, 3) if axis == 1 else _n(rng, int(rng.integers(1, 4)), 3) for _ in range(3)]
    if axis == 1:
        parts = [_n(rng, 2, int(rng.integers(1, 4))) for _ in range(3)]
    return parts, {"axis": axis}


def _gru(rng):
    d_in, d_h, T = 3, 4, int(rng.integers(1, 5))
    W = [_n(rng, d_h, d_in, scale=0.6) for _ in range(3)]
    U = [_n(rng, d_h, d_h, scale=0.6) for _ in range(3)]
    b = [_n(rng, d_h, scale=0.3) for _ in range(3)]
    return [_n(rng, T, d_in), _n(rng, d_h, scale=0.5), *W, *U, *b], {}


def _lstm(rng):
    d_in, d = 3, 4
    return [_n(rng, d_in), _n(rng, d, scale=0.5), _n(rng, d), _n(rng, 4 * d, d_in, scale=0.5),
            _n(rng, 4 * d, d, scale=0.5), _n(rng, 4 * d, scale=0.3)], {}


def _attention(rng):
    n, d_f, d_q, d_h, k = int(rng.integers(1, 6)), 4, 3, 5, 6
    return [_n(rng, n, d_f), _n(rng, d_q), _n(rng, d_h), _n(rng, 1, k), _n(rng, k, d_q, scale=0.5),
            _n(rng, k, d_h, scale=0.5), _n(rng, k, d_f, scale=0.5), _n(rng, k, scale=0.3)], {}


CASES: dict[str, Case] = {
    "add": _binary,
    "sub": _binary,
    "mul": _binary,
    "matmul": _matmul,
    "transpose": lambda rng: ([_n(rng, 3, 4)], {}),
    "sum": _reduce,
    "mean": _reduce,
    "take": lambda rng: ([_n(rng, 4, 5)], {"index": (int(rng.integers(4)), slice(1, 4))}),
    "gather_rows": lambda rng: ([_n(rng, 5, 3)], {"ids": tuple(int(i) for i in rng.integers(5, size=4))}),
    "reshape": lambda rng: ([_n(rng, 3, 4)], {"shape": (2, 6)}),
    "concat": _concat,
    "relu": _kinked,
    "tanh": lambda rng: ([_n(rng, 3, 4)], {}),
    "sigmoid": lambda rng: ([_n(rng, 3, 4, scale=2.0)], {}),
    "square": lambda rng: ([_n(rng, 3, 4)], {}),
    "softmax": lambda rng: ([_n(rng, 3, 5, scale=2.0)], {}),
    "log_softmax": lambda rng: ([_n(rng, 3, 5, scale=2.0)], {}),
    "layer_norm": lambda rng: ([_n(rng, 3, 6), _n(rng, 6), _n(rng, 6)], {"eps": 1e-5}),
    "gru": _gru,
    "lstm_cell": _lstm,
    "linear": lambda rng: ([_n(rng, *[(4,), (3, 4)][rng.integers(2)]), _n(rng, 5, 4)], {}),
    "affine": lambda rng: ([_n(rng, *[(4,), (3, 4)][rng.integers(2)]), _n(rng, 5, 4), _n(rng, 5)], {}),
    "additive_attention": _attention,
}


@dataclass
class OpReport:
    name: str
    points: int
    max_rel_error: float
    worst: CheckEntry | None

    def passed(self, tol: float = OP_TOL) -> bool:
        return not math.isnan(self.max_rel_error) and self.max_rel_error <= tol


@dataclass
class SweepReport:
    ops: list[OpReport] = field(default_factory=list)
    model: GradCheckReport | None = None
    op_tol: float = OP_TOL
    model_tol: float = MODEL_TOL

    @property
    def passed(self) -> bool:
        ok = all(op.passed(self.op_tol) for op in self.ops)
        return ok and (self.model is None or self.model.passed(self.model_tol))

    def worst_offender(self) -> str:
        """Name of the worst check relative to its tolerance."""
        scored = [(_ratio(op.max_rel_error, self.op_tol), f"op {op.name}") for op in self.ops]
        if self.model is not None and self.model.entries:
            w = self.model.worst()
            scored.append((_ratio(w.rel_error, self.model_tol), f"param {w.param}{list(w.index)}"))
        return max(scored)[1] if scored else ""

    def lines(self) -> list[str]:
        out = [f"op={op.name} points={op.points} max_rel_error={op.max_rel_error:.3e} "
               f"status={'ok' if op.passed(self.op_tol) else 'FAIL'}" for op in self.ops]
        if self.model is not None:
            for e in self.model.entries:
                out.append(f"param={e.param} index={list(e.index)} analytic={e.analytic:.6e} "
                           f"numeric={e.numeric:.6e} rel_error={e.rel_error:.3e}")
            out.append(f"model max_rel_error={self.model.max_rel_error:.3e} "
                       f"status={'ok' if self.model.passed(self.model_tol) else 'FAIL'}")
        return out


def _ratio(err: float, tol: float) -> float:
    return math.inf if math.isnan(err) else err / tol


def check_primitive(name: str, n_points: int = 100, seed: int = 0) -> OpReport:
    prim = nk.PRIMITIVES[name]
    case = CASES[name]
    rng = np.random.default_rng([seed, *name.encode()])
    entries = []
    for k in range(n_points):
        arrays, attrs = case(rng)
        params = [Param(f"{name}.in{i}", a) for i, a in enumerate(arrays)]
        R = nk.Tensor(rng.standard_normal(prim.forward(*arrays, **attrs)[0].shape))
        p = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(n)) for n in p.shape)

        def f():
            return nk.sum_(nk.mul(prim(*params, **attrs), R))

        entries.extend(nk.grad_check(f, params, coords=[(p, idx)]).entries)
    report = GradCheckReport(entries)
    return OpReport(name, n_points, report.max_rel_error, report.worst())


def sweep_primitives(n_points: int = 100, seed: int = 0, names=None) -> list[OpReport]:
    names = sorted(nk.PRIMITIVES) if names is None else names
    missing = [n for n in names if n not in CASES]
    if missing:
        raise nk.ConfigError(f"no gradcheck case for primitives {missing}")
    return [check_primitive(n, n_points, seed) for n in names]


def check_model(model, sample, n_params: int = 20, seed: int = 0) -> GradCheckReport:
    """Check ``n_params`` randomly sampled scalar parameters of ``model`` on one sample."""
    from .pipeline import forward

    params = model.params()
    rng = np.random.default_rng([seed, 7])
    coords = []
    for _ in range(n_params):
        p = params[int(rng.integers(len(params)))]
        coords.append((p, tuple(int(rng.integers(n)) for n in p.shape)))
    return nk.grad_check(lambda: forward(sample, model).loss, params, coords=coords)


def run(seed: int = 0, n_points: int = 100, model=None, sample=None, n_params: int = 20) -> SweepReport:
    report = SweepReport(sweep_primitives(n_points, seed))
    if model is not None:
        report.model = check_model(model, sample, n_params, seed)
    return report
