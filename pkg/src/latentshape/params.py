"""Parameter bookkeeping shared by the decoder and surrogate trainers."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import AdamState, Tensor, adam_step


class ParamStore:
    """Ordered name -> float64 array map with tape binding helpers."""

    def __init__(self, arrays=None):
        self._arrays = dict(arrays or {})

    def __contains__(self, name):
        return name in self._arrays

    def __getitem__(self, name) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name, value):
        self._arrays[name] = np.asarray(value, dtype=np.float64)

    def names(self):
        return list(self._arrays)

    def pop(self, name):
        return self._arrays.pop(name)

    def arrays(self):
        return dict(self._arrays)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})

    def bind(self, tape) -> dict:
        """Register every array as a tape leaf; returns name -> Tensor."""
        return {k: tape.leaf(v) for k, v in self._arrays.items()}

    def grads(self, gradmap, bound) -> dict:
        """Extract per-name gradients from a backward() result."""
        return {k: gradmap[t.node] for k, t in bound.items()}


class AdamOptimizer:
    """Adam over a ParamStore, one AdamState per array."""

    def __init__(self, store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.states = {k: AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
                       for k in store.names()}

    def step(self, grads: dict, lr=None):
        for name, g in grads.items():
            adam_step(self.states[name], self.store[name], g, lr=lr)


def cosine_lr(step, total_steps, base_lr, min_lr=0.0):
    """Cosine decay from base_lr to min_lr over total_steps."""
    if total_steps <= 1:
        return base_lr
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))


def init_linear(rng, n_in, n_out, scale=None):
    """He-style Gaussian init for a (n_in, n_out) weight matrix."""
    if scale is None:
        scale = math.sqrt(2.0 / n_in)
    return rng.normal(0.0, scale, size=(n_in, n_out))


def unwrap(x):
    """Concrete array of a Tensor, or the input unchanged."""
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
