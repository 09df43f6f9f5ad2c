"""Parameter containers and the small layer set the acoustic model is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=T.DTYPE), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero_init: bool = False,
                 bias: bool = True):
        if zero_init:
            self.weight = parameter(np.zeros((d_in, d_out)))
        else:
            bound = math.sqrt(6.0 / (d_in + d_out))
            self.weight = parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {kernel}")
        bound = math.sqrt(6.0 / (kernel * c_in + c_out))
        self.weight = parameter(rng.uniform(-bound, bound, size=(kernel, c_in, c_out)))
        self.bias = parameter(np.zeros(c_out))

    def forward(self, x):
        return T.conv1d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.table = parameter(rng.normal(0.0, d**-0.5, size=(n, d)))

    def forward(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise ValueError(f"token id out of range [0, {self.table.shape[0]})")
        return T.embedding(self.table, ids)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, active: bool) -> Tensor:
    """Drop with probability ``p`` using ``rng``; identity when inactive."""
    if not active or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("active dropout needs an explicit RNG stream")
    keep = rng.random(x.shape) >= p
    return T.dropout(x, keep, p)


def sinusoid_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"d_model={d} not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(d, d, rng)
        # a key bias only adds a per-query constant to the scores, which softmax removes
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        B, L, d = x.shape
        H, dh = self.heads, d // self.heads

        def split(t):
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        bias = np.where(mask[:, None, None, :], 0.0, -1e9)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (dh**-0.5) + bias
        attn = T.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return self.out(ctx)


class FFTBlock(Module):
    """Self-attention plus convolutional feed-forward, post-norm residuals."""

    def __init__(self, d: int, heads: int, ffn: int, kernel: int, p_drop: float,
                 rng: np.random.Generator):
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.conv1 = Conv1d(d, ffn, kernel, rng)
        self.conv2 = Conv1d(ffn, d, kernel, rng)
        self.norm2 = LayerNorm(d)
        self.p_drop = p_drop

    def forward(self, x: Tensor, mask: np.ndarray, rng=None, drop: bool = False) -> Tensor:
        m = mask[..., None].astype(T.DTYPE)
        a = dropout(self.attn(x, mask), self.p_drop, rng, drop)
        x = self.norm1(x + a) * m
        f = self.conv2(self.conv1(x).relu() * m)
        f = dropout(f, self.p_drop, rng, drop)
        return self.norm2(x + f) * m
