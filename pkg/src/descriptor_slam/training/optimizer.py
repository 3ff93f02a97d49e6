"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import numpy as np


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


class AdamW:
    """Decoupled-weight-decay Adam over a ParameterStore.

    ``trainable`` optionally restricts updates to a subset of parameter names
    (used when only the overlap head trains in stage 2).
    """

    def __init__(
        self,
        store,
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        trainable: list[str] | None = None,
    ):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.trainable = set(trainable) if trainable is not None else None
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v in store.items()}
        self.v = {name: np.zeros_like(v) for name, v in store.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in self.store.names():
            if self.trainable is not None and name not in self.trainable:
                continue
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p = self.store[name]
            p = p - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)
            self.store[name] = p
