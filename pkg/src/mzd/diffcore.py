"""Minimal dense reverse-mode autodiff on float64 numpy arrays.

Ops record onto the active :class:`Graph` (a context manager).  With no
active graph they run forward-only, which is what inference and
finite-difference probes use.  Parameters are leaf tensors created with
``needs_grad=True``; their ``.grad`` accumulates across graphs until the
caller resets it, which is exactly the per-batch gradient-sum semantics
the training loop wants.

Beyond the elementary suite (matmul, add, scale, concat, slice/gather,
sigmoid/exp/log/relu/gelu, softmax, layer_norm, sum/mean) there are fused
nodes with hand-written adjoints for the hot path: linear, multi-head
attention, row l2-normalization, focal/l1/GIoU/InfoNCE loss terms, and a
row-repeat used by query fusion.  Every node, fused or not, is checked
against central differences in the test suite.

Nondifferentiable points take fixed subgradients: 0 for |x| at 0, and
corner-coincidence indicators in the GIoU node resolve ties toward the
first argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

from . import _kernels as _k

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_CLAMP = 1e-12


class DiffcoreError(RuntimeError):
    """Graph misuse or non-finite values during forward/backward."""


class ShapeError(DiffcoreError):
    """Operands with incompatible shapes, named per primitive."""


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "needs_grad", "_bwd", "_op")

    def __init__(self, data, needs_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.needs_grad = needs_grad
        self._bwd: Callable[[np.ndarray], None] | None = None
        self._op: str = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.data.shape})"


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), needs_grad=True)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


_ACTIVE: Graph | None = None


# ops that can create non-finite values from finite inputs (domain or
# overflow); everything else maps finite to finite and is guarded only in
# "all" mode
_GUARDED_OPS = frozenset({"log", "exp"})


class Graph:
    """Tape of op records in construction (= topological) order.

    Single-owner during forward/backward; ``backward`` may run once, after
    which the graph must be rebuilt.  With ``check_finite=True`` (default)
    the loss and every op that can create a non-finite value are guarded;
    ``check_finite="all"`` guards every node's forward value and adjoint,
    which is slow and meant for debugging.
    """

    __slots__ = ("nodes", "check_finite", "_consumed", "_prev")

    def __init__(self, check_finite: bool | str = True):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite
        self._consumed = False
        self._prev: Graph | None = None

    def __enter__(self) -> "Graph":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None

    def _record(self, out: Tensor, bwd: Callable[[np.ndarray], None], op: str) -> None:
        cf = self.check_finite
        if cf and (cf == "all" or op in _GUARDED_OPS):
            if not math.isfinite(float(out.data.sum())):
                raise DiffcoreError(f"non-finite forward value at node '{op}'")
        out._bwd = bwd
        out._op = op
        self.nodes.append(out)

    def backward(self, loss: Tensor) -> None:
        """Accumulate adjoints of ``loss`` into every reachable leaf's .grad."""
        if self._consumed:
            raise DiffcoreError("backward already ran on this graph; rebuild it to rerun")
        self._consumed = True
        if loss.data.size != 1:
            raise DiffcoreError(f"loss must be scalar, got shape {loss.data.shape}")
        if not math.isfinite(float(loss.data)):
            raise DiffcoreError("loss is not finite")
        loss.grad = np.ones_like(loss.data)
        check_all = self.check_finite == "all"
        for t in reversed(self.nodes):
            if t.grad is None or t._bwd is None:
                continue
            if check_all and not math.isfinite(float(t.grad.sum())):
                raise DiffcoreError(f"non-finite adjoint at node '{t._op}'")
            t._bwd(t.grad)


def active_graph() -> Graph | None:
    return _ACTIVE


def _acc(t: Tensor, g: np.ndarray) -> None:
    # safe accumulate: copies on first store because g may alias another slot
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _acc_own(t: Tensor, g: np.ndarray) -> None:
    # for freshly allocated adjoints only
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementary primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    g = _ACTIVE
    if g is None or not (a.needs_grad or b.needs_grad):
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        if a.needs_grad:
            _acc(a, _unbroadcast(go, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(go, b.data.shape))

    g._record(out, bwd, "add")
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None
    g = _ACTIVE
    if g is None or not (a.needs_grad or b.needs_grad):
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        if a.needs_grad:
            _acc(a, _unbroadcast(go, a.data.shape))
        if b.needs_grad:
            _acc_own(b, _unbroadcast(-go, b.data.shape))

    g._record(out, bwd, "sub")
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    g = _ACTIVE
    if g is None or not (a.needs_grad or b.needs_grad):
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        if a.needs_grad:
            _acc_own(a, _unbroadcast(go * b.data, a.data.shape))
        if b.needs_grad:
            _acc_own(b, _unbroadcast(go * a.data, b.data.shape))

    g._record(out, bwd, "mul")
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c
    g = _ACTIVE
    if g is None or not a.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        _acc_own(a, go * c)

    g._record(out, bwd, "scale")
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    g = _ACTIVE
    if g is None or not (a.needs_grad or b.needs_grad):
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        if a.needs_grad:
            _acc_own(a, go @ b.data.T)
        if b.needs_grad:
            _acc_own(b, a.data.T @ go)

    g._record(out, bwd, "matmul")
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map ``x @ w + b``."""
    if x.data.shape[-1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[-1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out_data = x.data @ w.data + b.data
    g = _ACTIVE
    if g is None or not (x.needs_grad or w.needs_grad or b.needs_grad):
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        if x.needs_grad:
            _acc_own(x, go @ w.data.T)
        if w.needs_grad:
            _acc_own(w, x.data.T @ go)
        if b.needs_grad:
            _acc_own(b, go.sum(axis=0))

    g._record(out, bwd, "linear")
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    g = _ACTIVE
    if g is None or not any(p.needs_grad for p in parts):
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(go: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.needs_grad:
                sl = [slice(None)] * go.ndim
                sl[axis] = slice(lo, hi)
                _acc(p, go[tuple(sl)])

    g._record(out, bwd, "concat")
    return out


def rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous row slice ``x[lo:hi]``."""
    out_data = x.data[lo:hi]
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[lo:hi] += go

    g._record(out, bwd, "rows")
    return out


def cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous column slice ``x[:, lo:hi]``."""
    out_data = x.data[:, lo:hi]
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, lo:hi] += go

    g._record(out, bwd, "cols")
    return out


def gather_rows(x: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Row gather ``x[idx]``; set ``unique`` when indices never repeat."""
    out_data = x.data[idx]
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        if unique:
            x.grad[idx] += go
        else:
            np.add.at(x.grad, idx, go)

    g._record(out, bwd, "gather_rows")
    return out


def repeat_rows(x: Tensor, counts: np.ndarray) -> Tensor:
    """Repeat row i of x ``counts[i]`` times (rows with count 0 are dropped)."""
    if len(counts) != x.data.shape[0]:
        raise ShapeError(f"repeat_rows: {len(counts)} counts for {x.shape}")
    out_data = np.repeat(x.data, counts, axis=0)
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)
    nz = np.flatnonzero(counts)
    starts = np.concatenate([[0], np.cumsum(counts[nz])])[:-1]

    def bwd(go: np.ndarray) -> None:
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        if nz.size:
            x.grad[nz] += np.add.reduceat(go, starts, axis=0)

    g._record(out, bwd, "repeat_rows")
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        _acc(x, go.reshape(x.data.shape))

    g._record(out, bwd, "reshape")
    return out


def _unary(name: str, fwd, dfun):
    def op(x: Tensor) -> Tensor:
        out_data = fwd(x.data)
        g = _ACTIVE
        if g is None or not x.needs_grad:
            return Tensor(out_data)
        out = Tensor(out_data, needs_grad=True)

        def bwd(go: np.ndarray) -> None:
            _acc_own(x, go * dfun(x.data, out_data))

        g._record(out, bwd, name)
        return out

    op.__name__ = name
    return op


sigmoid = _unary("sigmoid", expit, lambda x, y: y * (1.0 - y))
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
relu = _unary("relu", lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU; the forward cdf is reused by the adjoint."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out_data = x.data * cdf
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        _acc_own(x, go * (cdf + x.data * pdf))

    g._record(out, bwd, "gelu")
    return out


def _pow(base: np.ndarray, p: float) -> np.ndarray:
    # float powers are slow; the focal defaults make 2/1/0 the hot cases
    if p == 2.0:
        return base * base
    if p == 1.0:
        return base
    if p == 0.0:
        return np.ones_like(base)
    return base**p


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        dot = (go * out_data).sum(axis=-1, keepdims=True)
        _acc_own(x, out_data * (go - dot))

    g._record(out, bwd, "softmax")
    return out


_LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Layer normalization over the last axis with learned gain and bias.

    2-d inputs with gradients on all three operands run through the jitted
    kernel; anything else takes the equivalent numpy path (epsilon 1e-5).
    """
    if x.data.shape[-1] != gain.data.shape[-1] or gain.data.shape != bias.data.shape:
        raise ShapeError(f"layer_norm: incompatible shapes {x.shape}, {gain.shape}, {bias.shape}")
    fast = x.data.ndim == 2
    if fast:
        out_data, xhat, inv = _k.ln_fwd(x.data, gain.data, bias.data)
        inv_keep = inv[:, None]
    else:
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv_keep = 1.0 / np.sqrt(var + _LN_EPS)
        xhat = xc * inv_keep
        out_data = xhat * gain.data + bias.data
    g = _ACTIVE
    if g is None or not (x.needs_grad or gain.needs_grad or bias.needs_grad):
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)
    d = x.data.shape[-1]

    def bwd(go: np.ndarray) -> None:
        if fast and x.needs_grad and gain.needs_grad and bias.needs_grad:
            dx, dg, db = _k.ln_bwd(go, gain.data, xhat, inv)
            _acc_own(x, dx)
            _acc_own(gain, dg)
            _acc_own(bias, db)
            return
        if x.needs_grad:
            dxhat = go * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _acc_own(x, inv_keep * (dxhat - m1 - xhat * m2))
        if gain.needs_grad:
            _acc_own(gain, (go * xhat).reshape(-1, d).sum(axis=0))
        if bias.needs_grad:
            _acc_own(bias, go.reshape(-1, d).sum(axis=0))

    g._record(out, bwd, "layer_norm")
    return out


def reduce_sum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum())
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        _acc_own(x, np.full_like(x.data, float(go)))

    g._record(out, bwd, "sum")
    return out


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out_data = np.asarray(x.data.sum() / n)
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        _acc_own(x, np.full_like(x.data, float(go) / n))

    g._record(out, bwd, "mean")
    return out


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Stack 0-d tensors into a vector."""
    out_data = np.array([float(p.data) for p in parts])
    g = _ACTIVE
    if g is None or not any(p.needs_grad for p in parts):
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        for i, p in enumerate(parts):
            if p.needs_grad:
                _acc_own(p, np.asarray(go[i]))

    g._record(out, bwd, "stack_scalars")
    return out


# ---------------------------------------------------------------------------
# fused nodes for the model and losses


def _heads(x: np.ndarray, n_heads: int, dh: int) -> np.ndarray:
    t = x.shape[0]
    return np.ascontiguousarray(x.reshape(t, n_heads, dh).transpose(1, 0, 2))


def _merge(xh: np.ndarray, d: int) -> np.ndarray:
    return np.ascontiguousarray(xh.transpose(1, 0, 2)).reshape(-1, d)


def _attn_fwd(qd, kd, vd, n_heads):
    tq, d = qd.shape
    dh = d // n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    qh, kh, vh = _heads(qd, n_heads, dh), _heads(kd, n_heads, dh), _heads(vd, n_heads, dh)
    s = qh @ kh.transpose(0, 2, 1)
    s *= inv_sqrt
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    out_data = _merge(a @ vh, d)
    return out_data, (a, qh, kh, vh, n_heads, dh, inv_sqrt, d)


def _attn_bwd(go, ctx):
    a, qh, kh, vh, n_heads, dh, inv_sqrt, d = ctx
    goh = _heads(go, n_heads, dh)
    dv = _merge(a.transpose(0, 2, 1) @ goh, d)
    da = goh @ vh.transpose(0, 2, 1)
    _k.softmax_bwd_3d(da, a, inv_sqrt)
    dq = _merge(da @ kh, d)
    dk = _merge(da.transpose(0, 2, 1) @ qh, d)
    return dq, dk, dv


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Scaled dot-product multi-head attention on projected q/k/v of shape
    (T, d); returns the merged-head context, (Tq, d)."""
    tq, d = q.data.shape
    tk = k.data.shape[0]
    if d % n_heads or k.data.shape[1] != d or v.data.shape != (tk, d):
        raise ShapeError(
            f"attention: q{q.shape} k{k.shape} v{v.shape} with {n_heads} heads"
        )
    out_data, ctx = _attn_fwd(q.data, k.data, v.data, n_heads)
    g = _ACTIVE
    if g is None or not (q.needs_grad or k.needs_grad or v.needs_grad):
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        dq, dk, dv = _attn_bwd(go, ctx)
        if q.needs_grad:
            _acc_own(q, dq)
        if k.needs_grad:
            _acc_own(k, dk)
        if v.needs_grad:
            _acc_own(v, dv)

    g._record(out, bwd, "attention")
    return out


def attention_packed(qkv: Tensor, n_heads: int) -> Tensor:
    """Self-attention over a packed (T, 3d) q|k|v projection."""
    t, d3 = qkv.data.shape
    if d3 % 3 or (d3 // 3) % n_heads:
        raise ShapeError(f"attention_packed: qkv {qkv.shape} with {n_heads} heads")
    d = d3 // 3
    qd = qkv.data[:, :d]
    kd = qkv.data[:, d : 2 * d]
    vd = qkv.data[:, 2 * d :]
    out_data, ctx = _attn_fwd(qd, kd, vd, n_heads)
    g = _ACTIVE
    if g is None or not qkv.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        dq, dk, dv = _attn_bwd(go, ctx)
        if qkv.grad is None:
            qkv.grad = np.empty_like(qkv.data)
            qkv.grad[:, :d] = dq
            qkv.grad[:, d : 2 * d] = dk
            qkv.grad[:, 2 * d :] = dv
        else:
            qkv.grad[:, :d] += dq
            qkv.grad[:, d : 2 * d] += dk
            qkv.grad[:, 2 * d :] += dv

    g._record(out, bwd, "attention_packed")
    return out


def attention_kv(q: Tensor, kv: Tensor, n_heads: int) -> Tensor:
    """Cross-attention: separate (Tq, d) queries, packed (Tk, 2d) k|v."""
    tq, d = q.data.shape
    tk, d2 = kv.data.shape
    if d2 != 2 * d or d % n_heads:
        raise ShapeError(f"attention_kv: q {q.shape} kv {kv.shape} with {n_heads} heads")
    kd = kv.data[:, :d]
    vd = kv.data[:, d:]
    out_data, ctx = _attn_fwd(q.data, kd, vd, n_heads)
    g = _ACTIVE
    if g is None or not (q.needs_grad or kv.needs_grad):
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        dq, dk, dv = _attn_bwd(go, ctx)
        if q.needs_grad:
            _acc_own(q, dq)
        if kv.needs_grad:
            if kv.grad is None:
                kv.grad = np.empty_like(kv.data)
                kv.grad[:, :d] = dk
                kv.grad[:, d:] = dv
            else:
                kv.grad[:, :d] += dk
                kv.grad[:, d:] += dv

    g._record(out, bwd, "attention_kv")
    return out


def cosine_rows(x: Tensor, anchor: np.ndarray) -> Tensor:
    """Cosine similarity of every row of x against a fixed anchor vector."""
    a = anchor / (np.sqrt(anchor @ anchor) + _CLAMP)
    norms = np.sqrt((x.data * x.data).sum(axis=1)) + _CLAMP
    y = x.data / norms[:, None]
    out_data = y @ a
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        _acc_own(x, (go / norms)[:, None] * (a[None, :] - y * out_data[:, None]))

    g._record(out, bwd, "cosine_rows")
    return out


def dot_rows(x: Tensor, anchor: np.ndarray) -> Tensor:
    """Raw dot product of every row of x with a fixed anchor vector."""
    out_data = x.data @ anchor
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        _acc_own(x, go[:, None] * anchor[None, :])

    g._record(out, bwd, "dot_rows")
    return out


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Normalize each row to unit l2 norm (epsilon-guarded at zero)."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)) + _CLAMP
    out_data = x.data / n
    g = _ACTIVE
    if g is None or not x.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        dot = (go * out_data).sum(axis=-1, keepdims=True)
        _acc_own(x, (go - out_data * dot) / n)

    g._record(out, bwd, "l2_normalize_rows")
    return out


def focal_sum(scores: Tensor, labels: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Binary focal loss summed over all entries.

    Label 1: -alpha * (1-s)^gamma * log s; label 0: -(1-alpha) * s^gamma *
    log(1-s).  Scores are clamped to (1e-12, 1-1e-12); the clamp region has
    zero subgradient.
    """
    if scores.data.shape != labels.shape:
        raise ShapeError(f"focal_sum: scores {scores.shape} vs labels {labels.shape}")
    labels64 = np.asarray(labels, dtype=np.float64)
    out_data = np.asarray(_k.focal_fwd(scores.data, labels64, alpha, gamma))
    g = _ACTIVE
    if g is None or not scores.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        _acc_own(scores, _k.focal_bwd(scores.data, labels64, alpha, gamma, float(go)))

    g._record(out, bwd, "focal_sum")
    return out


def l1_pair_sum(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum of elementwise absolute differences; sign subgradient 0 at ties."""
    if pred.data.shape != target.shape:
        raise ShapeError(f"l1_pair_sum: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    out_data = np.asarray(np.abs(diff).sum())
    g = _ACTIVE
    if g is None or not pred.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        _acc_own(pred, np.sign(diff) * float(go))

    g._record(out, bwd, "l1_pair_sum")
    return out


def giou_pair_loss_sum(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum over rows of ``1 - giou(pred_i, target_i)``.

    Boxes are (cx, cy, w, h).  Corner-coincidence indicators use >=/<=
    toward the predicted box, a fixed subgradient choice; a degenerate
    union or enclosing box contributes the constant 1 with zero gradient.
    """
    if pred.data.ndim != 2 or pred.data.shape[1] != 4 or pred.data.shape != target.shape:
        raise ShapeError(f"giou_pair_loss_sum: {pred.shape} vs {target.shape}")
    target64 = np.asarray(target, dtype=np.float64)
    out_data = np.asarray(_k.giou_loss_fwd(pred.data, target64))
    g = _ACTIVE
    if g is None or not pred.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)

    def bwd(go: np.ndarray) -> None:
        _acc_own(pred, _k.giou_loss_bwd(pred.data, target64, float(go)))

    g._record(out, bwd, "giou_pair_loss_sum")
    return out


def info_nce(sims: Tensor, n_pos: int, kappa: float) -> Tensor:
    """InfoNCE over a similarity vector whose first ``n_pos`` entries are the
    positives: mean over positives of -log softmax(sims/kappa)[i]."""
    if sims.data.ndim != 1 or not 0 < n_pos <= sims.data.shape[0]:
        raise ShapeError(f"info_nce: sims {sims.shape} with n_pos={n_pos}")
    z = sims.data / kappa
    m = z.max()
    e = np.exp(z - m)
    lse = m + math.log(e.sum())
    out_data = np.asarray(lse - z[:n_pos].sum() / n_pos)
    g = _ACTIVE
    if g is None or not sims.needs_grad:
        return Tensor(out_data)
    out = Tensor(out_data, needs_grad=True)
    soft = e / e.sum()

    def bwd(go: np.ndarray) -> None:
        ds = soft / kappa
        ds[:n_pos] -= 1.0 / (n_pos * kappa)
        _acc_own(sims, ds * float(go))

    g._record(out, bwd, "info_nce")
    return out


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    max_rel_err: float
    worst: GradCheckEntry | None

    def __str__(self) -> str:
        lines = [f"checked {len(self.entries)} coordinates, max rel err {self.max_rel_err:.3e}"]
        if self.worst is not None:
            w = self.worst
            lines.append(
                f"worst: {w.name}[{w.index}] analytic={w.analytic:.6e} numeric={w.numeric:.6e}"
            )
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-5)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    n_coords: int = 200,
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` rebuilds and returns the scalar loss from the current parameter
    values; it is re-evaluated forward-only with single coordinates nudged
    by ±eps.  Coordinates are sampled without replacement across all
    parameters.  Relative error uses max(|analytic|, |numeric|, 1e-5) as
    denominator so that near-zero gradients are compared at that absolute
    scale.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must be in [1e-7, 1e-3], got {eps}")
    rng = rng or np.random.default_rng(0)

    saved = [(name, None if t.grad is None else t.grad.copy()) for name, t in params]
    for _, t in params:
        t.grad = None
    g = Graph()
    with g:
        loss = fn()
    g.backward(loss)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for name, t in params}
    for (name, t), (_, old) in zip(params, saved):
        t.grad = old

    sizes = [t.data.size for _, t in params]
    total = int(np.sum(sizes))
    n = min(n_coords, total)
    coords = rng.choice(total, size=n, replace=False)
    bounds = np.cumsum(sizes)

    entries = []
    for flat in sorted(int(c) for c in coords):
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = flat - (0 if pi == 0 else int(bounds[pi - 1]))
        name, t = params[pi]
        orig = t.data.flat[local]
        t.data.flat[local] = orig + eps
        f_plus = float(fn().data)
        t.data.flat[local] = orig - eps
        f_minus = float(fn().data)
        t.data.flat[local] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name].flat[local])
        entries.append(GradCheckEntry(name, local, a, numeric, _rel_err(a, numeric)))

    worst = max(entries, key=lambda e: e.rel_err) if entries else None
    return GradCheckReport(entries, worst.rel_err if worst else 0.0, worst)
