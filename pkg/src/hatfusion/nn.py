"""Small module system and the transformer building blocks used by the model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Context:
    """Per-forward-pass state: train/eval flag, dropout RNG and an optional trace.

    When ``trace`` is a dict, attention modules append their weight arrays
    to ``trace["attention"]`` and blocks record intermediate values.
    """

    training: bool = False
    rng: np.random.Generator | None = None
    trace: dict | None = None

    def record(self, key: str, value) -> None:
        if self.trace is not None:
            self.trace.setdefault(key, []).append(value)


EVAL = Context()


class Module:
    """Parameter container. Tensors, buffers and sub-modules are discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x W + b`` with ``W`` stored as (in, out)."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = T.parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, LN_EPS)


class BatchNorm(Module):
    def __init__(self, d: int):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)

    def __call__(self, x: Tensor, ctx: Context, mask: np.ndarray | None = None) -> Tensor:
        return T.batch_norm(
            x, self.gain, self.bias, self.running_mean, self.running_var,
            training=ctx.training, momentum=BN_MOMENTUM, eps=BN_EPS, mask=mask,
        )


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``n_heads`` heads.

    Queries come from ``x_q`` (B, Tq, d), keys and values from ``x_kv``
    (B, Tk, d). ``key_mask`` (B, Tk) marks valid keys.
    """

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int):
        if d % n_heads:
            raise ValueError(f"width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q_proj = Linear(rng, d, d)
        self.k_proj = Linear(rng, d, d)
        self.v_proj = Linear(rng, d, d)
        self.out_proj = Linear(rng, d, d)

    def _split(self, x: Tensor) -> Tensor:
        B, n, d = x.shape
        h = self.n_heads
        return x.reshape(B, n, h, d // h).transpose(0, 2, 1, 3)

    def __call__(self, x_q: Tensor, x_kv: Tensor, ctx: Context, key_mask: np.ndarray | None = None) -> Tensor:
        B, Tq, d = x_q.shape
        q = self._split(self.q_proj(x_q))
        k = self._split(self.k_proj(x_kv))
        v = self._split(self.v_proj(x_kv))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // self.n_heads))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        weights = T.softmax(scores, axis=-1, mask=mask)
        ctx.record("attention", weights.data)
        out = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return self.out_proj(out)


class FeedForward(Module):
    """Two-layer GELU MLP."""

    def __init__(self, rng: np.random.Generator, d: int, hidden: int):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm encoder layer: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, dropout_p: float):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, 4 * d)
        self._p = dropout_p

    def __call__(self, x: Tensor, ctx: Context, key_mask: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + T.dropout(self.attn(h, h, ctx, key_mask), self._p, training=ctx.training, rng=ctx.rng)
        x = x + T.dropout(self.ffn(self.norm2(x)), self._p, training=ctx.training, rng=ctx.rng)
        return x
