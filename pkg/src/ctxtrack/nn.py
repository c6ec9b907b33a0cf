"""Parameter containers and the small layer set the tracker is built from."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Walks attributes to find parameters, in attribute definition order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ag.ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        std = d_in ** -0.5 if std is None else std
        self.weight = ag.parameter(rng.normal(0.0, std, (d_in, d_out)))
        self.bias = ag.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            y = ag.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        else:
            y = ag.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ag.parameter(np.ones(d))
        self.bias = ag.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class Mlp(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng, std=0.5 * hidden ** -0.5)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class ResidualMlp(Module):
    """Pre-norm residual MLP, used by the early hierarchical stages."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.norm = LayerNorm(d)
        self.mlp = Mlp(d, hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.mlp(self.norm(x))


class Attention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng, std=0.5 * d ** -0.5)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, record: bool = False) -> Tensor:
        b, n, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ag.matmul(q, k.swapaxes(-1, -2)) * (dh ** -0.5)
        att = ag.softmax(scores, axis=-1)
        if record:
            self.last_weights = att.data.copy()
        out = ag.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class Block(Module):
    """Pre-norm transformer block with global attention."""

    def __init__(self, d: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = Mlp(d, d * mlp_ratio, rng)

    def __call__(self, x: Tensor, record: bool = False) -> Tensor:
        x = x + self.attn(self.norm1(x), record=record)
        return x + self.mlp(self.norm2(x))
