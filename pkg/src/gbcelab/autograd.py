"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  A :class:`Graph`
wraps a builder function so the same computation can be re-run on new
bindings (forward), differentiated (backward) and checked against central
finite differences.
"""
from __future__ import annotations

import functools
import itertools
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np
from scipy import special

DTYPE = np.float64
_node_ids = itertools.count()


class ShapeError(ValueError):
    """Incompatible operand shapes for an op."""


class NumericError(FloatingPointError):
    """An op produced a non-finite value."""


class ContractError(RuntimeError):
    """API misuse (e.g. backward from a non-scalar root)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 parents: Sequence["Tensor"] = (), op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self.op = op
        self.name = name
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def label(self) -> str:
        return self.name or f"{self.op}#{self.node_id}"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor({self.label()}, shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` on every upstream tensor that requires it."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape} at {self.label()}")
        order = topological_order(self)
        for node in order:
            if node is not self:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, name=name)


def topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _op(kind: str):
    """Wrap an op: translate numpy shape failures and reject non-finite outputs."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                out = fn(*args, **kwargs)
            except ValueError as exc:
                if isinstance(exc, ShapeError):
                    raise
                shapes = [a.shape for a in args if isinstance(a, (Tensor, np.ndarray))]
                raise ShapeError(f"{kind}: incompatible shapes {shapes}: {exc}") from exc
            out.op = kind
            if not np.all(np.isfinite(out.data)):
                raise NumericError(f"non-finite output at node {out.label()}")
            return out

        return wrapper

    return deco


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data, parents=parents)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.backward_fn = backward_fn
    return out


# ---------------------------------------------------------------- elementwise

@_op("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


@_op("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


@_op("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


@_op("neg")
def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


@_op("scale")
def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: a._accumulate(g * c))


@_op("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    y = special.expit(a.data)
    return _make(y, (a,), lambda g: a._accumulate(g * y * (1.0 - y)))


@_op("softplus")
def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(0.0, a.data)
    return _make(y, (a,), lambda g: a._accumulate(g * special.expit(a.data)))


@_op("logsigmoid")
def logsigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) evaluated as -softplus(-x)."""
    y = -np.logaddexp(0.0, -a.data)
    return _make(y, (a,), lambda g: a._accumulate(g * special.expit(-a.data)))


@_op("log")
def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError(f"log of non-positive value at input {a.label()}")
    return _make(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


@_op("exp")
def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: a._accumulate(g * y))


def _log_expm1(x: np.ndarray) -> np.ndarray:
    # log(e^x - 1) for x > 0 without overflow for large x
    big = x > 30.0
    out = np.empty_like(x)
    out[big] = x[big] + np.log1p(-np.exp(-x[big]))
    out[~big] = np.log(np.expm1(x[~big]))
    return out


@_op("log_expm1")
def log_expm1(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError(f"log_expm1 needs positive input at {a.label()}")
    y = _log_expm1(a.data)
    # d/dx log(e^x - 1) = 1 / (1 - e^-x)
    return _make(y, (a,), lambda g: a._accumulate(g / -np.expm1(-a.data)))


@_op("clamp_max")
def clamp_max(a: Tensor, hi: float) -> Tensor:
    keep = a.data <= hi
    return _make(np.where(keep, a.data, hi), (a,), lambda g: a._accumulate(g * keep))


@_op("relu")
def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: a._accumulate(g * pos))


_SQRT_HALF = 1.0 / np.sqrt(2.0)


@_op("gelu")
def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _SQRT_HALF))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make(x * cdf, (a,), lambda g: a._accumulate(g * (cdf + x * pdf)))


@_op("dropout")
def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return _make(a.data, (a,), lambda g: a._accumulate(g))
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


# ---------------------------------------------------------------- reductions

@_op("sum")
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(y, (a,), bw)


@_op("mean")
def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(y.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(y, (a,), bw)


@_op("logsumexp")
def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = (np.log(s) + m).squeeze(axis)

    def bw(g):
        a._accumulate(np.expand_dims(g, axis) * e / s)

    return _make(y, (a,), bw)


# ---------------------------------------------------------------- indexing / linear algebra

@_op("concat")
def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, cuts, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _make(y, tuple(tensors), bw)


@_op("reshape")
def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


@_op("take_last")
def take_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., j] = a[..., idx[..., j]] along the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    y = np.take_along_axis(a.data, idx, axis=-1)

    def bw(g):
        ga = np.zeros_like(a.data)
        flat = ga.reshape(-1, a.shape[-1])
        rows = np.repeat(np.arange(flat.shape[0]), idx.shape[-1])
        np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))
        a._accumulate(ga)

    return _make(y, (a,), bw)


@_op("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    y = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(y, (a, b), bw)


@_op("linear")
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias over the last axis, flattening leading axes."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    X = x.data.reshape(-1, x.shape[-1])
    y = X @ weight.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        G = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate((G @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(X.T @ G)
        if bias is not None and bias.requires_grad:
            bias._accumulate(G.sum(axis=0))

    return _make(y.reshape(x.shape[:-1] + (weight.shape[1],)), parents, bw)


@_op("select")
def select(a: Tensor, mask: np.ndarray) -> Tensor:
    """Rows ``a[mask]`` for a boolean mask over the leading axes."""
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[mask] = g
        a._accumulate(ga)

    return _make(a.data[mask], (a,), bw)


def _scatter_rows(n_rows: int, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    out = np.zeros((n_rows, rows.shape[-1]), dtype=DTYPE)
    np.add.at(out, idx.reshape(-1), rows.reshape(-1, rows.shape[-1]))
    return out


@_op("embedding")
def embedding(weight: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ShapeError(f"embedding index out of range [0, {weight.shape[0]}) for {weight.label()}")
    return _make(weight.data[idx], (weight,),
                 lambda g: weight._accumulate(_scatter_rows(weight.shape[0], idx, g)))


@_op("layer_norm")
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def bw(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv / d * (d * gx - gx.sum(-1, keepdims=True)
                                     - xhat * (gx * xhat).sum(-1, keepdims=True)))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


_MASKED = -1e9


@_op("causal_attention")
def causal_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Optional[np.ndarray] = None,
                     n_heads: int = 1, dropout_rate: float = 0.0,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    """Multi-head scaled dot-product attention with a lower-triangular mask.

    q, k, v: [batch, seq, dim]. ``key_mask`` [batch, seq] is True for real
    (non-padding) keys.  Position j only attends to keys at positions <= j.
    """
    B, L, D = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ShapeError(f"attention operands differ: {q.shape}, {k.shape}, {v.shape}")
    if D % n_heads:
        raise ShapeError(f"dim {D} not divisible by {n_heads} heads")
    dh = D // n_heads

    def split(t):
        return t.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    c = 1.0 / np.sqrt(dh)
    allowed = np.tril(np.ones((L, L), dtype=bool))[None, None]
    if key_mask is not None:
        allowed = allowed & np.asarray(key_mask, dtype=bool)[:, None, None, :]
    logits = np.where(allowed, (qh @ kh.transpose(0, 1, 3, 2)) * c, _MASKED)
    logits -= logits.max(-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(-1, keepdims=True)
    if rng is not None and dropout_rate > 0.0:
        drop = (rng.random(p.shape) >= dropout_rate) / (1.0 - dropout_rate)
    else:
        drop = None
    pd = p * drop if drop is not None else p
    out = (pd @ vh).transpose(0, 2, 1, 3).reshape(B, L, D)

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, L, D)

    def bw(g):
        gh = split(g)
        if v.requires_grad:
            v._accumulate(merge(pd.transpose(0, 1, 3, 2) @ gh))
        gpd = gh @ vh.transpose(0, 1, 3, 2)
        gp = gpd * drop if drop is not None else gpd
        glog = p * (gp - (gp * p).sum(-1, keepdims=True))
        glog = np.where(allowed, glog, 0.0) * c
        if q.requires_grad:
            q._accumulate(merge(glog @ kh))
        if k.requires_grad:
            k._accumulate(merge(glog.transpose(0, 1, 3, 2) @ qh))

    return _make(out, (q, k, v), bw)


@_op("sampled_scores")
def sampled_scores(h: Tensor, table: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., j] = <h[...], table[idx[..., j]]>.

    When many candidates are scored against a small table it is cheaper to
    score the whole table with one matmul and pick columns; otherwise the
    candidate rows are gathered.  Both routes compute the same values.
    """
    idx = np.asarray(idx, dtype=np.int64)
    lead = h.shape[:-1]
    if idx.shape[:-1] != lead:
        raise ShapeError(f"candidate index shape {idx.shape} does not match hidden {h.shape}")
    d = h.shape[-1]
    n_rows = int(np.prod(lead)) if lead else 1
    n_cand = idx.shape[-1]
    V = table.shape[0]
    H = h.data.reshape(n_rows, d)
    I = idx.reshape(n_rows, n_cand)
    dense = V <= 16 * n_cand and n_rows * V <= 64_000_000

    if dense:
        full = H @ table.data.T
        y = np.take_along_axis(full, I, axis=1)
        del full
    else:
        rows = table.data[I]
        y = np.einsum("nd,nkd->nk", H, rows)

    def bw(g):
        G = g.reshape(n_rows, n_cand)
        if dense:
            flat = np.bincount((I + np.arange(n_rows)[:, None] * V).ravel(), weights=G.ravel(),
                               minlength=n_rows * V).reshape(n_rows, V)
            if h.requires_grad:
                h._accumulate((flat @ table.data).reshape(h.shape))
            if table.requires_grad:
                table._accumulate(flat.T @ H)
        else:
            if h.requires_grad:
                h._accumulate(np.einsum("nk,nkd->nd", G, rows).reshape(h.shape))
            if table.requires_grad:
                table._accumulate(_scatter_rows(V, I, G[..., None] * H[:, None, :]))

    return _make(y.reshape(idx.shape), (h, table), bw)


@_op("full_scores")
def full_scores(h: Tensor, table: Tensor, skip: int = 1) -> Tensor:
    """Score ``h`` against every table row from ``skip`` on (row 0 is padding)."""
    W = table.data[skip:]
    y = h.data @ W.T

    def bw(g):
        if h.requires_grad:
            h._accumulate(g @ W)
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            gt[skip:] = g.reshape(-1, g.shape[-1]).T @ h.data.reshape(-1, h.shape[-1])
            table._accumulate(gt)

    return _make(y, (h, table), bw)


# ---------------------------------------------------------------- graph wrapper

class Graph:
    """A re-runnable computation: ``build(params, inputs, rng) -> scalar Tensor``.

    ``params`` maps names to trainable leaf tensors.  Each forward draws a
    fresh dropout generator from ``dropout_seed`` so repeated forwards on the
    same bindings are bit-identical.
    """

    def __init__(self, build: Callable[..., Tensor], params: Mapping[str, Tensor],
                 dropout_seed: Optional[int] = None):
        self.build = build
        self.params = dict(params)
        self.dropout_seed = dropout_seed
        self.root: Optional[Tensor] = None
        self.nodes: list = []
        self.bindings: Dict[str, np.ndarray] = {}

    def forward(self, bindings: Optional[Mapping[str, np.ndarray]] = None) -> Tensor:
        if bindings is not None:
            self.bindings = dict(bindings)
        rng = None if self.dropout_seed is None else np.random.default_rng(self.dropout_seed)
        self.root = self.build(self.params, self.bindings, rng)
        self.nodes = topological_order(self.root)
        return self.root

    def backward(self) -> Dict[str, np.ndarray]:
        if self.root is None:
            raise ContractError("backward called before forward")
        for p in self.params.values():
            p.grad = None
        self.root.backward()
        return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in self.params.items()}


def forward(graph: Graph, bindings: Optional[Mapping[str, np.ndarray]] = None) -> Tensor:
    return graph.forward(bindings)


def backward(graph: Graph) -> Dict[str, np.ndarray]:
    return graph.backward()


GRAD_CHECK_FLOOR = 1e-4


def check_gradients(graph: Graph, epsilon: float = 1e-5,
                    bindings: Optional[Mapping[str, np.ndarray]] = None) -> float:
    """Worst relative error between backward and central finite differences.

    Per parameter the error is ``|analytic - numeric|_inf / max(|analytic|_inf,
    |numeric|_inf, floor)`` where ``floor`` is ``GRAD_CHECK_FLOOR`` times the
    largest gradient anywhere in the graph; gradients that are zero in exact
    arithmetic (e.g. attention key biases) then don't score 1.0 on roundoff.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    graph.forward(bindings)
    analytic = {k: v.copy() for k, v in graph.backward().items()}
    numerics = {}
    for name, p in graph.params.items():
        numeric = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ContractError(f"parameter {name} is not contiguous")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(graph.forward().data)
            flat[i] = orig - epsilon
            down = float(graph.forward().data)
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * epsilon)
        numerics[name] = numeric
    overall = max((max(np.abs(analytic[n]).max(initial=0.0), np.abs(numerics[n]).max(initial=0.0))
                   for n in numerics), default=0.0)
    worst = 0.0
    for name, numeric in numerics.items():
        scale_ = max(np.abs(analytic[name]).max(initial=0.0), np.abs(numeric).max(initial=0.0),
                     GRAD_CHECK_FLOOR * overall)
        if scale_ > 0.0:
            worst = max(worst, float(np.abs(analytic[name] - numeric).max() / scale_))
    graph.forward()
    return worst
