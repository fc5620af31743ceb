"""Parameter containers: linear layers, attention and pre-norm transformer blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import DimensionError, Tensor, param_rng

INIT_STD = 0.02


class ConfigError(ValueError):
    """Invalid model configuration."""


def trunc_normal(shape, seed: int, name: str, std: float = INIT_STD) -> Tensor:
    """Truncated normal on [-2std, 2std] drawn from the parameter's own stream."""
    rng = param_rng(seed, name)
    vals = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return Tensor(vals, requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


class Module:
    """Tree of named parameter tensors.

    Attribute insertion order fixes parameter order, so ``named_parameters``
    is deterministic and matches checkpoint layout.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list) and val and all(isinstance(v, Module) for v in val):
                for i, sub in enumerate(val):
                    yield from sub.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        own = dict(self.named_parameters(prefix))
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            # keep the stored precision so that a load/save cycle is bit-exact
            p.data = arr.astype(arr.dtype if arr.dtype.kind == "f" else p.dtype, copy=True)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, seed: int, name: str, std: float = INIT_STD):
        self.weight = trunc_normal((d_in, d_out), seed, name + ".weight", std)
        self.bias = zeros((d_out,), name + ".bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"linear expects last axis {self.weight.shape[0]}, got {x.shape}")
        return T.add_trailing(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, name: str, eps: float = 1e-5):
        self.gain = ones((dim,), name + ".gain")
        self.bias = zeros((dim,), name + ".bias")
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query/key-value widths.

    Queries live in ``q_dim``, keys and values in ``kv_dim``; both are projected
    to ``inner_dim`` split across ``heads`` and the result is projected to
    ``out_dim``.
    """

    def __init__(self, q_dim, kv_dim, inner_dim, out_dim, heads, seed, name, std=INIT_STD):
        if inner_dim % heads:
            raise ConfigError(f"inner dim {inner_dim} is not divisible by {heads} heads")
        self.q = Linear(q_dim, inner_dim, seed, name + ".q", std)
        self.k = Linear(kv_dim, inner_dim, seed, name + ".k", std)
        self.v = Linear(kv_dim, inner_dim, seed, name + ".v", std)
        self.o = Linear(inner_dim, out_dim, seed, name + ".o", std)
        self._heads = heads

    def _split(self, x: Tensor) -> Tensor:
        lead, length, width = x.shape[:-2], x.shape[-2], x.shape[-1]
        h = self._heads
        x = T.reshape(x, lead + (length, h, width // h))
        n = len(lead)
        return T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    def __call__(self, xq: Tensor, xkv: Tensor | None = None, bias=None) -> Tensor:
        xkv = xq if xkv is None else xkv
        return multi_head_attention(xq, xkv, xkv, self._heads, self, bias)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, params: MultiHeadAttention,
                         bias: np.ndarray | None = None) -> Tensor:
    """Attention with distinct key and value inputs (``k`` and ``v`` share row count).

    ``bias`` is an optional constant ``(Lq, Lk)`` score offset; ``-inf`` entries
    hide a key from a query.
    """
    if q.shape[:-2] != k.shape[:-2]:
        raise DimensionError(f"attention batch axes differ: {q.shape} vs {k.shape}")
    if k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} must share rows")
    if heads != params._heads:
        raise ConfigError(f"params were built for {params._heads} heads, got {heads}")
    Q = params._split(params.q(q))
    K = params._split(params.k(k))
    V = params._split(params.v(v))
    n = Q.ndim - 2
    scores = T.scale(T.matmul(Q, T.transpose(K, tuple(range(n)) + (n + 1, n))), 1.0 / math.sqrt(Q.shape[-1]))
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != scores.shape[-2:]:
            raise DimensionError(f"score bias {bias.shape} does not match scores {scores.shape[-2:]}")
        scores = T.add_trailing(scores, Tensor(bias, dtype=scores.dtype))
    ctx = T.matmul(T.softmax(scores, axis=-1), V)
    lead = ctx.shape[:-3]
    m = len(lead)
    ctx = T.transpose(ctx, tuple(range(m)) + (m + 1, m, m + 2))
    ctx = T.reshape(ctx, lead + (ctx.shape[-3], ctx.shape[-2] * ctx.shape[-1]))
    return params.o(ctx)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, seed: int, name: str, std=INIT_STD):
        self.fc1 = Linear(dim, hidden, seed, name + ".fc1", std)
        self.fc2 = Linear(hidden, dim, seed, name + ".fc2", std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, seed: int, name: str, std=INIT_STD):
        self.ln1 = LayerNorm(dim, name + ".ln1")
        self.attn = MultiHeadAttention(dim, dim, dim, dim, heads, seed, name + ".attn", std)
        self.ln2 = LayerNorm(dim, name + ".ln2")
        self.mlp = MLP(dim, int(round(dim * mlp_ratio)), seed, name + ".mlp", std)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))
