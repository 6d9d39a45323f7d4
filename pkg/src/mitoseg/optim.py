"""Adam optimizer over named parameter tensors, with full state
serialization so a resumed run continues bit-identically."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)

    def state_tensors(self, prefix):
        """(name, array) pairs for checkpointing, prefixed to stay unique."""
        out = []
        for name, _ in self.params:
            out.append((f"{prefix}.m.{name}", self.m[name]))
            out.append((f"{prefix}.v.{name}", self.v[name]))
        return out

    def load_state(self, prefix, arrays, t):
        self.t = int(t)
        for name, p in self.params:
            for store, key in ((self.m, f"{prefix}.m.{name}"), (self.v, f"{prefix}.v.{name}")):
                arr = arrays[key]
                if arr.shape != p.data.shape:
                    raise ValueError(f"optimizer state {key} has shape {arr.shape}, expected {p.data.shape}")
                store[name] = arr.astype(p.data.dtype)
