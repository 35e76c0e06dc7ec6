"""Named parameter store and AdamW with linear warmup and global-norm
clipping. Update order per step: clip grads, advance the step counter,
decay weights by lr_t*wd, then the bias-corrected moment update."""
from __future__ import annotations

import numpy as np


class NonFiniteGradient(RuntimeError):
    pass


class ParameterStore:
    """Parameters with their Adam moments and a shared step counter."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self.params = {}
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, array):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        arr = np.asarray(array, dtype=self.dtype)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def names(self):
        return list(self.params)


class LiveParams:
    """One live autodiff Tensor per parameter, wrapping the store's arrays by
    reference, so a training step can read the accumulated grads back out
    after backward() and then reset for the next step."""

    def __init__(self, store):
        self.store = store
        self._live = {}

    def t(self, name):
        from .tensor import Tensor
        t = self._live.get(name)
        if t is None:
            t = Tensor(self.store.params[name], requires_grad=True)
            self._live[name] = t
        return t

    def drain(self):
        grads = {}
        for name, arr in self.store.params.items():
            t = self._live.get(name)
            g = t.grad if t is not None else None
            grads[name] = np.zeros_like(arr) if g is None else g
        self._live = {}
        return grads


def init_linear_weight(rng, fan_in, fan_out, dtype=np.float32):
    """Uniform in +-1/sqrt(fan_in); matching biases are zeros."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def lr_at(step, base_lr, warmup_steps):
    """Linear warmup; step is 1-based (the value after incrementing)."""
    return base_lr * min(1.0, step / warmup_steps)


def global_grad_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float(np.square(g.astype(np.float64)).sum())
    return float(np.sqrt(total))


def adam_step(store, grads, base_lr, warmup_steps=10000, grad_clip=0.25,
              beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
    missing = set(store.params) - set(grads)
    if missing:
        raise ValueError(f"missing gradients for {sorted(missing)}")
    for name, g in grads.items():
        if g.shape != store.params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    norm = global_grad_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteGradient(f"gradient norm is {norm}")
    scale = grad_clip / max(norm, grad_clip)
    store.step += 1
    t = store.step
    lr_t = lr_at(t, base_lr, warmup_steps)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = grads[name].astype(p.dtype) * p.dtype.type(scale)
        m, v = store.m[name], store.v[name]
        p *= 1.0 - lr_t * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return lr_t
