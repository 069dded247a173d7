"""Adam with optional row-sparse updates for latent tables."""

from __future__ import annotations

import logging
import math

import numpy as np

log = logging.getLogger(__name__)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    """Cosine decay from ``base`` at step 0 to ``floor`` at ``total``."""
    if total <= 0:
        return base
    frac = min(max(step / total, 0.0), 1.0)
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * frac))


class Adam:
    """Adam state per named array.

    Row-sparse arrays (latent tables) keep a step count per row, so a row's
    moments and bias correction only advance when that row is updated.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, np.ndarray] = {}
        self.skipped = 0

    def _ensure(self, name, shape, sparse: bool):
        if name not in self.m:
            self.m[name] = np.zeros(shape, np.float32)
            self.v[name] = np.zeros(shape, np.float32)
            self.t[name] = np.zeros(shape[0] if sparse else (), np.float32)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict[str, float],
             rows: dict[str, np.ndarray] | None = None) -> bool:
        """Update ``params`` in place; returns False when the step was skipped.

        ``rows`` maps a parameter name to the row indices to update; other
        rows of that array keep their values and optimizer state.
        """
        rows = rows or {}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                log.warning("non-finite gradient in %s; step skipped (%d so far)", name, self.skipped)
                return False
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            p = params[name]
            idx = rows.get(name)
            self._ensure(name, p.shape, idx is not None)
            if idx is None:
                self.t[name] += 1
                t = self.t[name]
                m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
                v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
                mhat = m / (1 - b1**t)
                vhat = v / (1 - b2**t)
                p -= (lrs[name] * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
            else:
                idx = np.unique(idx)
                self.t[name][idx] += 1
                t = self.t[name][idx].reshape(-1, *([1] * (p.ndim - 1)))
                gi = g[idx]
                m = self.m[name][idx] = b1 * self.m[name][idx] + (1 - b1) * gi
                v = self.v[name][idx] = b2 * self.v[name][idx] + (1 - b2) * gi * gi
                mhat = m / (1 - b1**t)
                vhat = v / (1 - b2**t)
                p[idx] -= (lrs[name] * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
            out[f"adam.t.{name}"] = self.t[name]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8,
                    skipped: int = 0) -> "Adam":
        opt = cls(beta1, beta2, eps)
        opt.skipped = skipped
        for key, arr in arrays.items():
            if not key.startswith("adam."):
                continue
            kind, name = key[5], key[7:]
            getattr(opt, kind)[name] = np.array(arr, np.float32)
        return opt
