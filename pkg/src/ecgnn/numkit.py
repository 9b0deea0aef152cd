"""Minimal differentiable numeric core.

Values are float64 numpy arrays wrapped in :class:`Tensor` nodes. Every
primitive is a :class:`Primitive` with a pure forward and an analytic
backward; applying one records a node that points at its inputs, so
``backward(loss)`` can walk the graph in reverse topological order.
An optional :class:`ExprGraph` context additionally records the executed
nodes in order, which makes forward replay and ordered backward possible.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class ConfigError(ValueError):
    """Unknown option or malformed configuration."""


class NonFiniteError(ContractError):
    """An operation received NaN or infinite input it cannot normalise."""


# ---------------------------------------------------------------------------
# graph nodes


class Tensor:
    """Immutable dense array node.

    ``parents``/``prim``/``attrs`` describe how the value was produced;
    leaf tensors (constants and parameters) have no primitive.
    """

    __slots__ = ("data", "prim", "parents", "attrs", "cache", "__weakref__")

    def __init__(self, data, prim: "Primitive | None" = None, parents=(), attrs=None, cache=None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.prim = prim
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.cache = cache

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.prim.name if self.prim else "leaf"
        return f"Tensor(shape={self.shape}, op={tag})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index=index)

    @property
    def T(self):
        return transpose(self)


class Param(Tensor):
    """Named learnable leaf with a gradient accumulator."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value):
        super().__init__(np.array(value, dtype=DTYPE, copy=True))
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self.data.shape:
            raise ShapeError(f"cannot assign {value.shape} into param {self.name} of shape {self.data.shape}")
        self.data = value.copy()

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# expression graph recording


class _GraphStack(threading.local):
    def __init__(self):
        self.stack: list["ExprGraph"] = []


_ACTIVE = _GraphStack()


@dataclass
class ExprGraph:
    """Ordered record of executed primitive applications.

    Use as a context manager; every node created inside is appended to
    ``nodes`` in execution order, which is a valid topological order.
    """

    nodes: list[Tensor] = field(default_factory=list)

    def __enter__(self) -> "ExprGraph":
        _ACTIVE.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> bool:
        """Recompute every node from its recorded inputs; True iff bit-identical."""
        for node in self.nodes:
            args = [p.data for p in node.parents]
            out, _ = node.prim.forward(*args, **node.attrs)
            out = np.asarray(out, dtype=DTYPE)
            if out.shape != node.data.shape or out.tobytes() != node.data.tobytes():
                return False
        return True


@dataclass(frozen=True)
class Primitive:
    """A differentiable operation.

    ``forward(*arrays, **attrs) -> (out, cache)`` and
    ``backward(g, out, cache, *arrays, **attrs) -> tuple of input grads``
    (``None`` for inputs that receive no gradient).
    """

    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., tuple]

    def __call__(self, *inputs, **attrs) -> Tensor:
        parents = [as_tensor(x) for x in inputs]
        out, cache = self.forward(*[p.data for p in parents], **attrs)
        node = Tensor(out, self, parents, attrs, cache)
        stack = _ACTIVE.stack
        if stack:
            stack[-1].nodes.append(node)
        return node


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str):
    """Register a primitive from a ``(forward, backward)`` pair returned by the decorated factory."""

    def wrap(factory):
        fwd, bwd = factory()
        prim = Primitive(name, fwd, bwd)
        PRIMITIVES[name] = prim
        return prim

    return wrap


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


@primitive("add")
def add():
    def fwd(a, b):
        _check_broadcast(a, b, "add")
        return a + b, None

    def bwd(g, out, cache, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return fwd, bwd


@primitive("sub")
def sub():
    def fwd(a, b):
        _check_broadcast(a, b, "sub")
        return a - b, None

    def bwd(g, out, cache, a, b):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return fwd, bwd


@primitive("mul")
def mul():
    def fwd(a, b):
        _check_broadcast(a, b, "mul")
        return a * b, None

    def bwd(g, out, cache, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, bwd


@primitive("matmul")
def matmul():
    # 1-D operands follow numpy semantics (row vector on the left, column on the right)
    def fwd(a, b):
        ka = a.shape[-1]
        kb = b.shape[0]
        if a.ndim not in (1, 2) or b.ndim not in (1, 2) or ka != kb:
            raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
        return a @ b, None

    def bwd(g, out, cache, a, b):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if a.ndim == 2:
            return np.outer(g, b), g @ a
        if b.ndim == 2:
            return b @ g, np.outer(a, g)
        return g * b, g * a

    return fwd, bwd


@primitive("transpose")
def transpose():
    def fwd(a):
        if a.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got {a.shape}")
        return a.T.copy(), None

    def bwd(g, out, cache, a):
        return (g.T,)

    return fwd, bwd


@primitive("sum")
def sum_():
    def fwd(a, axis=None):
        return np.asarray(a.sum(axis=axis)), None

    def bwd(g, out, cache, a, axis=None):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return fwd, bwd


@primitive("mean")
def mean():
    def fwd(a, axis=None):
        return np.asarray(a.mean(axis=axis)), None

    def bwd(g, out, cache, a, axis=None):
        n = a.size if axis is None else a.shape[axis]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return fwd, bwd


@primitive("take")
def take():
    # basic indexing only: ints, slices and tuples of those
    def fwd(a, index=None):
        return np.array(a[index], dtype=DTYPE), None

    def bwd(g, out, cache, a, index=None):
        ga = np.zeros_like(a)
        ga[index] += g
        return (ga,)

    return fwd, bwd


@primitive("gather_rows")
def gather_rows():
    def fwd(table, ids=()):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ContractError(f"token id out of range for table with {table.shape[0]} rows")
        return table[ids], None

    def bwd(g, out, cache, table, ids=()):
        gt = np.zeros_like(table)
        np.add.at(gt, np.asarray(ids, dtype=np.int64), g)
        return (gt,)

    return fwd, bwd


@primitive("reshape")
def reshape():
    def fwd(a, shape=()):
        return a.reshape(shape).copy(), None

    def bwd(g, out, cache, a, shape=()):
        return (g.reshape(a.shape),)

    return fwd, bwd


def _concat_fwd(*parts, axis=0):
    if not parts:
        raise ShapeError("concat of zero tensors")
    ref = parts[0]
    ax = axis % ref.ndim
    bounds = []
    pos = 0
    for p in parts:
        if p.ndim != ref.ndim or p.shape[:ax] != ref.shape[:ax] or p.shape[ax + 1:] != ref.shape[ax + 1:]:
            raise ShapeError(f"concat: side dimensions disagree: {[q.shape for q in parts]}")
        bounds.append((pos, pos + p.shape[ax]))
        pos += p.shape[ax]
    return np.concatenate(parts, axis=ax), (ax, bounds)


def _concat_bwd(g, out, cache, *parts, axis=0):
    ax, bounds = cache
    lead = (slice(None),) * ax
    return tuple(g[lead + (slice(lo, hi),)] for lo, hi in bounds)


concat_prim = Primitive("concat", _concat_fwd, _concat_bwd)
PRIMITIVES["concat"] = concat_prim


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat_prim(*parts, axis=axis)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix."""
    return concat([reshape(r, shape=(1, -1)) for r in rows], axis=0)


@primitive("relu")
def relu():
    def fwd(a):
        return np.maximum(a, 0.0), None

    def bwd(g, out, cache, a):
        # subgradient at exactly 0 is 0
        return (g * (a > 0),)

    return fwd, bwd


@primitive("tanh")
def tanh():
    def fwd(a):
        return np.tanh(a), None

    def bwd(g, out, cache, a):
        return (g * (1.0 - out * out),)

    return fwd, bwd


def _sigmoid(a):
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


@primitive("sigmoid")
def sigmoid():
    def fwd(a):
        return _sigmoid(a), None

    def bwd(g, out, cache, a):
        return (g * out * (1.0 - out),)

    return fwd, bwd


@primitive("square")
def square():
    def fwd(a):
        return a * a, None

    def bwd(g, out, cache, a):
        return (2.0 * a * g,)

    return fwd, bwd


def _softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@primitive("softmax")
def softmax_rows():
    def fwd(a):
        out = _softmax(a)
        if not np.isfinite(out.sum()):
            raise NonFiniteError("softmax_rows: non-finite input")
        return out, None

    def bwd(g, out, cache, a):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return fwd, bwd


@primitive("log_softmax")
def log_softmax():
    def fwd(a):
        z = a - a.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), None

    def bwd(g, out, cache, a):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return fwd, bwd


@primitive("layer_norm")
def layer_norm():
    """Normalise over the last axis with biased variance."""

    def fwd(x, gain, bias, eps=1e-5):
        if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        return gain * xhat + bias, (xhat, inv)

    def bwd(g, out, cache, x, gain, bias, eps=1e-5):
        xhat, inv = cache
        axes = tuple(range(x.ndim - 1))
        ggain = (g * xhat).sum(axis=axes)
        gbias = g.sum(axis=axes)
        gx_hat = g * gain
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return fwd, bwd


@primitive("gru")
def gru_sequence():
    """Whole-sequence GRU with reset applied before the candidate's recurrent matmul.

    Inputs: x (T, d_in), h0 (d_h), W_z, W_r, W_n (d_h, d_in), U_z, U_r, U_n (d_h, d_h),
    b_z, b_r, b_n (d_h). Output: states (T, d_h).
    """

    def fwd(x, h0, Wz, Wr, Wn, Uz, Ur, Un, bz, br, bn):
        T = x.shape[0]
        if T < 1:
            raise ContractError("gru: empty sequence")
        if x.ndim != 2 or x.shape[1] != Wz.shape[1]:
            raise ShapeError(f"gru: input {x.shape} does not match W of shape {Wz.shape}")
        xz = x @ Wz.T + bz
        xr = x @ Wr.T + br
        xn = x @ Wn.T + bn
        d = h0.shape[0]
        H = np.empty((T, d))
        Z = np.empty((T, d))
        R = np.empty((T, d))
        N = np.empty((T, d))
        h = h0
        for t in range(T):
            z = _sigmoid(xz[t] + Uz @ h)
            r = _sigmoid(xr[t] + Ur @ h)
            n = np.tanh(xn[t] + Un @ (r * h))
            h = (1.0 - z) * n + z * h
            Z[t], R[t], N[t], H[t] = z, r, n, h
        return H, (Z, R, N)

    def bwd(G, H, cache, x, h0, Wz, Wr, Wn, Uz, Ur, Un, bz, br, bn):
        Z, R, N = cache
        T = x.shape[0]
        Hp = np.vstack([h0[None, :], H[:-1]])
        gaz = np.empty_like(Z)
        gar = np.empty_like(R)
        gan = np.empty_like(N)
        UzT, UrT, UnT = Uz.T, Ur.T, Un.T
        gh = np.zeros_like(h0)
        for t in range(T - 1, -1, -1):
            hp, z, r, n = Hp[t], Z[t], R[t], N[t]
            gh = gh + G[t]
            an = gh * (1.0 - z) * (1.0 - n * n)
            grh = UnT @ an
            az = gh * (hp - n) * z * (1.0 - z)
            ar = grh * hp * r * (1.0 - r)
            gh = gh * z + grh * r + UzT @ az + UrT @ ar
            gaz[t], gar[t], gan[t] = az, ar, an
        gx = gaz @ Wz + gar @ Wr + gan @ Wn
        return (gx, gh, gaz.T @ x, gar.T @ x, gan.T @ x, gaz.T @ Hp, gar.T @ Hp, gan.T @ (R * Hp),
                gaz.sum(0), gar.sum(0), gan.sum(0))

    return fwd, bwd


@primitive("lstm_cell")
def lstm_cell():
    """One LSTM step. Inputs x (d_in), h (d), c (d), W (4d, d_in), U (4d, d), b (4d).

    Gate order i, f, o, g. Output is the stacked (2, d) array [h', c'].
    """

    def fwd(x, h, c, W, U, b):
        d = h.shape[0]
        if W.shape != (4 * d, x.shape[0]) or U.shape != (4 * d, d):
            raise ShapeError(f"lstm_cell: W {W.shape}/U {U.shape} inconsistent with x {x.shape}, h {h.shape}")
        a = W @ x + U @ h + b
        i = _sigmoid(a[:d])
        f = _sigmoid(a[d:2 * d])
        o = _sigmoid(a[2 * d:3 * d])
        gg = np.tanh(a[3 * d:])
        c2 = f * c + i * gg
        tc = np.tanh(c2)
        h2 = o * tc
        return np.stack([h2, c2]), (i, f, o, gg, tc)

    def bwd(G, out, cache, x, h, c, W, U, b):
        i, f, o, gg, tc = cache
        gh2, gc2 = G[0], G[1]
        gc = gc2 + gh2 * o * (1.0 - tc * tc)
        ga = np.concatenate([
            gc * gg * i * (1.0 - i),
            gc * c * f * (1.0 - f),
            gh2 * tc * o * (1.0 - o),
            gc * i * (1.0 - gg * gg),
        ])
        return W.T @ ga, U.T @ ga, gc * f, np.outer(ga, x), np.outer(ga, h), ga

    return fwd, bwd


@primitive("linear")
def linear():
    """``x W^T`` for a vector or for each row of a matrix."""

    def fwd(x, W):
        if x.shape[-1] != W.shape[-1] or W.ndim != 2 or x.ndim not in (1, 2):
            raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
        return x @ W.T, None

    def bwd(g, out, cache, x, W):
        gW = np.outer(g, x) if x.ndim == 1 else g.T @ x
        return g @ W, gW

    return fwd, bwd


@primitive("affine")
def affine_prim():
    def fwd(x, W, b):
        if x.shape[-1] != W.shape[-1] or W.ndim != 2 or b.shape != W.shape[:1] or x.ndim not in (1, 2):
            raise ShapeError(f"affine: input {x.shape}, W {W.shape}, b {b.shape}")
        return x @ W.T + b, None

    def bwd(g, out, cache, x, W, b):
        if x.ndim == 1:
            return g @ W, np.outer(g, x), g
        return g @ W, g.T @ x, g.sum(axis=0)

    return fwd, bwd


@primitive("additive_attention")
def additive_attention():
    """softmax_i( w . tanh(W_feat f_i + W_q q + W_h h + b) ) over the rows f_i of ``feat``.

    Shapes: feat (N, d_f), q (d_q), h (d_h), w (1, k), W_q (k, d_q), W_h (k, d_h),
    W_feat (k, d_f), b (k). Output: attention weights (N,).
    """

    def fwd(feat, q, h, w, W_q, W_h, W_feat, b):
        if feat.ndim != 2 or feat.shape[1] != W_feat.shape[1] or w.shape != (1, W_feat.shape[0]):
            raise ShapeError(f"additive_attention: feat {feat.shape}, W_feat {W_feat.shape}, w {w.shape}")
        ctx = W_q @ q + W_h @ h + b
        t = np.tanh(feat @ W_feat.T + ctx)
        return _softmax(t @ w[0]), t

    def bwd(g, att, t, feat, q, h, w, W_q, W_h, W_feat, b):
        gl = att * (g - g @ att)
        gw = (gl @ t)[None, :]
        gpre = np.outer(gl, w[0]) * (1.0 - t * t)
        gctx = gpre.sum(axis=0)
        return (gpre @ W_feat, W_q.T @ gctx, W_h.T @ gctx, gw, np.outer(gctx, q), np.outer(gctx, h),
                gpre.T @ feat, gctx)

    return fwd, bwd


# ---------------------------------------------------------------------------
# composite helpers


def activation(kind: str, x) -> Tensor:
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(x)


def affine(x, W, b) -> Tensor:
    """``W x + b`` for a vector ``x``; row-wise ``X W^T + b`` for a matrix."""
    return affine_prim(x, W, b)


# ---------------------------------------------------------------------------
# reverse pass


def _topo(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, graph: ExprGraph | None = None) -> None:
    """Accumulate d loss / d p into ``grad`` of every reachable :class:`Param`.

    With ``graph`` the recorded execution order is walked instead of
    re-sorting from ``loss``.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.prim is None:
        if isinstance(loss, Param):
            loss.grad += 1.0
        return
    order = graph.nodes if graph is not None else _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node.prim is None:
            continue
        parents = node.parents
        gins = node.prim.backward(g, node.data, node.cache, *[p.data for p in parents], **node.attrs)
        for p, gp in zip(parents, gins):
            if gp is None:
                continue
            if p.prim is None:
                if isinstance(p, Param):
                    p.grad += gp
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = gp if prev is None else prev + gp


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class CheckEntry:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[CheckEntry]

    @property
    def max_rel_error(self) -> float:
        errs = [e.rel_error for e in self.entries]
        if not errs:
            return 0.0
        if any(math.isnan(e) for e in errs):
            return math.nan
        return max(errs)

    def worst(self) -> CheckEntry | None:
        if not self.entries:
            return None
        return max(self.entries, key=lambda e: math.inf if math.isnan(e.rel_error) else e.rel_error)

    def passed(self, tol: float) -> bool:
        err = self.max_rel_error
        return not math.isnan(err) and err <= tol


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).reshape(()))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Param],
    coords: Sequence[tuple[Param, tuple[int, ...]]] | None = None,
    step: Callable[[float], float] = lambda x: 1e-5 * (1.0 + abs(x)),
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the current values of ``params``.
    Every coordinate is checked unless ``coords`` names a subset.
    NaN values of ``f`` end up in the report as NaN errors.
    """
    saved = [p.grad for p in params]
    for p in params:
        p.zero_grad()
    with np.errstate(all="ignore"):
        loss = f()
        if np.all(np.isfinite(loss.data)):
            backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}
    for p, g in zip(params, saved):
        p.grad = g

    if coords is None:
        coords = [(p, idx) for p in params for idx in np.ndindex(*p.shape)]

    entries = []
    for p, idx in coords:
        x0 = p.data[idx]
        h = step(float(x0))
        buf = p.data.copy()
        with np.errstate(all="ignore"):
            buf[idx] = x0 + h
            p.data = buf.copy()
            fp = _scalar(f())
            buf[idx] = x0 - h
            p.data = buf.copy()
            fm = _scalar(f())
        buf[idx] = x0
        p.data = buf
        num = (fp - fm) / (2.0 * h)
        ana = float(analytic[id(p)][idx])
        err = relative_error(ana, num) if np.isfinite(num) and np.isfinite(ana) else math.nan
        entries.append(CheckEntry(p.name, tuple(int(i) for i in idx), ana, num, err))
    return GradCheckReport(entries)
