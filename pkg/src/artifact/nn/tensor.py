"""Reverse-mode autodiff on numpy arrays, plus the layer set used by the
models here: linear, GRU cell, causal self-attention, layer norm, dropout,
embeddings, mse. Works in float32 or float64; gradient-check tests run it
in float64.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(np.asarray(-1.0, dtype=self.dtype)))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis, keepdims) * (1.0 / n)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss):
    if loss.shape != ():
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    topo, seen = [], set()
    stack_ = [loss]
    while stack_:
        t = stack_[-1]
        if id(t) in seen:
            stack_.pop()
            continue
        pending = [p for p in t._parents
                   if p.requires_grad and id(p) not in seen]
        if pending:
            stack_.extend(pending)
        else:
            seen.add(id(t))
            topo.append(t)
            stack_.pop()
    loss.grad = np.asarray(1.0, dtype=loss.dtype)
    for t in reversed(topo):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# -- primitives --------------------------------------------------------------

def add(a, b):
    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), bwd)


def mul(a, b):
    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), bwd)


def matmul(a, b):
    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)),
                                  a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g),
                                  b.shape))
    return _node(np.matmul(a.data, b.data), (a, b), bwd)


def reshape(a, shape):
    old = a.data.shape

    def bwd(g):
        a._accum(g.reshape(old))
    return _node(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    inv = np.argsort(axes)

    def bwd(g):
        a._accum(g.transpose(inv))
    return _node(a.data.transpose(axes), (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape))
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    splits = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def bwd(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p._accum(gp)
    return _node(np.concatenate([p.data for p in parts], axis=axis),
                 parts, bwd)


def stack(parts, axis=0):
    parts = [_wrap(p) for p in parts]

    def bwd(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accum(np.take(g, i, axis=axis))
    return _node(np.stack([p.data for p in parts], axis=axis), parts, bwd)


def relu(a):
    mask = a.data > 0

    def bwd(g):
        a._accum(g * mask)
    return _node(a.data * mask, (a,), bwd)


def tanh(a):
    out_data = np.tanh(a.data)

    def bwd(g):
        a._accum(g * (1.0 - out_data * out_data))
    return _node(out_data, (a,), bwd)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a._accum(g * out_data * (1.0 - out_data))
    return _node(out_data, (a,), bwd)


def softmax(a):
    """Softmax over the last axis."""
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        a._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _node(y, (a,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    lead = tuple(range(x.data.ndim - 1))

    def bwd(g):
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias._accum(g.sum(axis=lead))
        if x.requires_grad:
            dxh = g * gain.data
            x._accum(inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                            - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)))
    return _node(xhat * gain.data + bias.data, (x, gain, bias), bwd)


def embedding_lookup(table, ids):
    ids = np.asarray(ids)

    def bwd(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accum(acc)
    return _node(table.data[ids], (table,), bwd)


def index_rows(x, idx):
    """Select rows along the second-to-last axis by unique indices; the
    backward pass scatters the incoming grads back to those rows."""
    idx = np.asarray(idx)
    if np.unique(idx).size != idx.size:
        raise ShapeError("index_rows requires unique indices")

    def bwd(g):
        acc = np.zeros_like(x.data)
        acc[..., idx, :] = g
        x._accum(acc)
    return _node(np.take(x.data, idx, axis=-2), (x,), bwd)


def dropout(x, p, train_flag, rng=None):
    """Inverted dropout: scales kept entries by 1/(1-p) so the expectation is
    the identity; no-op when train_flag is false."""
    if not train_flag or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# -- layers ------------------------------------------------------------------

def linear(x, W, b=None):
    if x.data.shape[-1] != W.data.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {W.shape}")
    if b is not None and b.data.shape != (W.data.shape[1],):
        raise ShapeError(f"linear bias: {b.shape} vs {W.shape}")
    y = matmul(x, W)
    return y if b is None else add(y, b)


def gru_cell(x, h, params):
    """One gated-recurrent step.

    r = sig(W_r [x,h] + b_r), u = sig(W_u [x,h] + b_u),
    n = tanh(W_n [x, r*h] + b_n), h' = (1-u)*n + u*h.
    """
    din = x.data.shape[-1] + h.data.shape[-1]
    for gate in ("r", "u", "n"):
        if params[f"W_{gate}"].data.shape[0] != din:
            raise ShapeError(f"gru W_{gate}: {params[f'W_{gate}'].shape} "
                             f"vs input {din}")
    xh = concat([x, h], axis=-1)
    r = sigmoid(linear(xh, params["W_r"], params["b_r"]))
    u = sigmoid(linear(xh, params["W_u"], params["b_u"]))
    xrh = concat([x, mul(r, h)], axis=-1)
    n = tanh(linear(xrh, params["W_n"], params["b_n"]))
    one = Tensor(np.asarray(1.0, dtype=x.dtype))
    return add(mul(add(one, -u), n), mul(u, h))


def causal_self_attention(x, params, n_heads=1):
    """Scaled dot-product attention with a lower-triangular mask over the
    second-to-last axis; x is [..., T, D]."""
    D = x.data.shape[-1]
    if D % n_heads:
        raise ShapeError(f"{n_heads} heads do not divide dim {D}")
    T = x.data.shape[-2]
    q = linear(x, params["W_q"], params["b_q"])
    k_ = linear(x, params["W_k"], params["b_k"])
    v = linear(x, params["W_v"], params["b_v"])
    dh = D // n_heads
    lead = x.data.shape[:-2]
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(t):
        return transpose(reshape(t, lead + (T, n_heads, dh)), perm)

    q, k_, v = split(q), split(k_), split(v)
    att = matmul(q, transpose(k_, tuple(range(nl)) + (nl, nl + 2, nl + 1)))
    att = att * (1.0 / np.sqrt(dh))
    # callers with padded sequences pass a full additive mask (causal plus
    # padding, diagonal kept finite so no softmax row is entirely -inf)
    mask = params.get("att_mask")
    if mask is None:
        neg = np.full((T, T), -np.inf, dtype=x.dtype)
        mask = Tensor(np.triu(neg, 1))
    att = add(att, _wrap(mask))
    y = matmul(softmax(att), v)
    y = reshape(transpose(y, perm), lead + (T, D))
    return y


def mse_loss(pred, target, mask=None):
    """Mean squared error per element; with a mask, averaged over the masked
    elements only (mask is broadcast against pred)."""
    d = pred - _wrap(target)
    if mask is None:
        return (d * d).mean()
    m = _wrap(mask)
    denom = float(np.broadcast_to(m.data, d.shape).sum())
    return (d * d * m).sum() * (1.0 / denom)
