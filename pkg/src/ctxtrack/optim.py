"""Adam with decoupled weight decay over named parameter groups."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor


class AdamW:
    def __init__(self, groups: list[dict], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        """``groups``: dicts with ``params`` (list of Tensor) and ``lr``."""
        self.groups = [{"params": list(g["params"]), "lr": float(g["lr"])} for g in groups]
        self.base_lr = [g["lr"] for g in self.groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for g in self.groups for p in g["params"]}
        self.v = {id(p): np.zeros_like(p.data) for g in self.groups for p in g["params"]}

    def set_lr_scale(self, scale: float) -> None:
        for g, base in zip(self.groups, self.base_lr):
            g["lr"] = base * scale

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for g in self.groups:
            lr = g["lr"]
            for p in g["params"]:
                grad = grads[p]
                m, v = self.m[id(p)], self.v[id(p)]
                m *= self.b1
                m += (1.0 - self.b1) * grad
                v *= self.b2
                v += (1.0 - self.b2) * grad * grad
                p.data = p.data * (1.0 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict[Tensor, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total
