"""Adam over named parameter arrays with per-array learning rates and step counts."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-15):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float]) -> None:
        """In-place update of every array in `grads` (arrays missing from `grads` are untouched)."""
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.steps[name] = 0
            m, v = self.m[name], self.v[name]
            self.steps[name] += 1
            k = self.steps[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr = lrs[name] * np.sqrt(1 - b2 ** k) / (1 - b1 ** k)
            p -= lr * m / (np.sqrt(v) + self.eps)

    def reindex(self, names, source: np.ndarray) -> None:
        """Carry moments across a resize: source[i] is the old row of new row i, or -1 (fresh)."""
        fresh = source < 0
        src = np.where(fresh, 0, source)
        for name in names:
            if name not in self.m:
                continue
            for store in (self.m, self.v):
                old = store[name]
                new = old[src].copy()
                new[fresh] = 0.0
                store[name] = new
