"""FIFO memory of projected past-frame tokens and the memory-attention block."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderOutput
from .nn import INIT_STD, Block, ConfigError, LayerNorm, Linear, Module, MultiHeadAttention, trunc_normal
from .tensor import ContractError, DimensionError, Tensor


@dataclass
class MemoryEntry:
    tokens: Tensor  # (..., N, d): projection + spatial position embedding
    timestamp: int


@dataclass
class MemoryBank:
    """Capacity-bounded queue of :class:`MemoryEntry`, oldest first."""

    capacity: int = 5
    entries: list[MemoryEntry] = field(default_factory=list)
    last_timestamp: int | None = None

    def __post_init__(self):
        if self.capacity < 0:
            raise ConfigError("memory capacity must be >= 0")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def timestamps(self) -> list[int]:
        return [e.timestamp for e in self.entries]

    def append(self, entry: MemoryEntry) -> None:
        if self.last_timestamp is not None and entry.timestamp <= self.last_timestamp:
            raise ContractError(
                f"timestamp {entry.timestamp} is not after the last pushed timestamp {self.last_timestamp}"
            )
        self.last_timestamp = entry.timestamp
        if self.capacity == 0:
            return
        self.entries.append(entry)
        while len(self.entries) > self.capacity:
            self.entries.pop(0)

    def clear(self) -> None:
        self.entries.clear()
        self.last_timestamp = None


class MemoryAttention(Module):
    """Parameters of the memory path.

    ``proj`` maps encoder tokens (width D) into the memory width d; positions are
    a spatial table over the N patch slots plus a temporal table indexed by
    relative age (row 0 is the current frame, row a the a-th most recent
    memory entry).

    ``radius`` limits which keys a query patch may attend to: only tokens whose
    patch position lies within ``radius`` grid cells (Euclidean) of the query's
    own position, in every memory slot. ``radius=0`` attends along time at the
    query's own location only; ``None`` lets every query see every key.
    """

    def __init__(self, embed_dim: int, num_patches: int, capacity: int = 5, mem_dim: int = 64,
                 heads: int = 4, mlp_ratio: float = 4.0, seed: int = 0, std: float = INIT_STD,
                 radius: float | None = 0.0):
        if mem_dim % heads:
            raise ConfigError(f"memory width {mem_dim} is not divisible by {heads} heads")
        if radius is not None and radius < 0:
            raise ConfigError("memory attention radius must be >= 0 or None")
        side = math.isqrt(num_patches)
        if radius not in (None, 0, 0.0) and side * side != num_patches:
            raise ConfigError("a positive memory radius needs a square patch grid")
        self._radius = radius
        self._embed_dim = embed_dim
        self._num_patches = num_patches
        self._capacity = capacity
        self._mem_dim = mem_dim
        self.proj = Linear(embed_dim, mem_dim, seed, "mem.proj", std)
        self.pos_spatial = trunc_normal((num_patches, mem_dim), seed, "mem.pos_spatial", std)
        self.pos_temporal = trunc_normal((capacity + 1, mem_dim), seed, "mem.pos_temporal", std)
        self.consolidate = Linear(mem_dim, mem_dim, seed, "mem.consolidate", std)
        self.ln_q = LayerNorm(embed_dim, "mem.ln_q")
        self.cross = MultiHeadAttention(embed_dim, mem_dim, mem_dim, embed_dim, heads, seed, "mem.cross", std)
        self.self_block = Block(embed_dim, heads, mlp_ratio, seed, "mem.self_block", std)

    @property
    def capacity(self) -> int:
        return self._capacity

    @property
    def radius(self) -> float | None:
        return self._radius

    def locality_bias(self, slots: int) -> np.ndarray:
        """``(N, slots * N)`` score offsets: 0 inside the radius, ``-inf`` outside."""
        side = math.isqrt(self._num_patches)
        yy, xx = np.divmod(np.arange(self._num_patches), side)
        dist = np.hypot(yy[:, None] - yy[None, :], xx[:, None] - xx[None, :])
        block = np.where(dist <= self._radius, 0.0, -np.inf)
        return np.concatenate([block] * slots, axis=1)

    @property
    def num_patches(self) -> int:
        return self._num_patches

    def compress(self, y_patch: Tensor) -> Tensor:
        """Project to the memory width and add the spatial position table."""
        if y_patch.shape[-2:] != (self._num_patches, self._embed_dim):
            raise DimensionError(
                f"expected (..., {self._num_patches}, {self._embed_dim}) patch tokens, got {y_patch.shape}"
            )
        return T.add_trailing(self.proj(y_patch), self.pos_spatial)

    def age_embedding(self, age: int) -> Tensor:
        return T.take(self.pos_temporal, age)


def push(bank: MemoryBank, y_patch: Tensor, t: int, params: MemoryAttention) -> MemoryBank:
    """Compress ``y_patch`` and append it to ``bank`` as frame ``t``, evicting the oldest entry if full."""
    if bank.last_timestamp is not None and t <= bank.last_timestamp:
        raise ContractError(f"timestamp {t} is not after the last pushed timestamp {bank.last_timestamp}")
    if bank.capacity == 0:
        bank.last_timestamp = t
        return bank
    bank.append(MemoryEntry(params.compress(y_patch), t))
    return bank


def memory_attend(bank: MemoryBank, current: EncoderOutput | Tensor, params: MemoryAttention) -> Tensor:
    """Temporally enriched patch tokens for the current frame, shape ``(..., N, D)``.

    Keys/values are the consolidated memory tokens followed by the current
    frame's own compressed tokens; with an empty bank only the latter remain.
    """
    y_patch = current.y_patch if isinstance(current, EncoderOutput) else current
    cur = T.add_trailing(params.compress(y_patch), params.age_embedding(0))
    parts = []
    count = len(bank.entries)
    if count > params.capacity:
        raise ConfigError(f"bank holds {count} entries but parameters support {params.capacity}")
    for i, entry in enumerate(bank.entries):
        if entry.tokens.shape != cur.shape:
            raise DimensionError(f"memory entry {entry.tokens.shape} does not match current tokens {cur.shape}")
        parts.append(T.add_trailing(entry.tokens, params.age_embedding(count - i)))
    if parts:
        memory = params.consolidate(T.concat(parts, axis=-2))
        kv = T.concat([memory, cur], axis=-2)
    else:
        kv = cur
    query = params.ln_q(y_patch)
    if params.radius is None:
        attended = params.cross(query, kv)
    elif params.radius == 0:
        attended = _attend_in_place(query, kv, count + 1, params)
    else:
        attended = params.cross(query, kv, bias=params.locality_bias(count + 1))
    return params.self_block(y_patch + attended)


def _attend_in_place(query: Tensor, kv: Tensor, slots: int, params: MemoryAttention) -> Tensor:
    """Radius-0 attention: every patch attends over its own location's ``slots`` tokens.

    Equivalent to the masked form but regroups tokens so each location is a
    batch row, costing ``O(N * slots)`` instead of ``O(N^2 * slots)``.
    """
    lead = query.shape[:-2]
    n, width = kv.shape[-2] // slots, kv.shape[-1]
    m = len(lead)
    grouped = T.reshape(kv, lead + (slots, n, width))
    grouped = T.transpose(grouped, tuple(range(m)) + (m + 1, m, m + 2))
    q = T.reshape(query, lead + (n, 1, query.shape[-1]))
    out = params.cross(q, grouped)
    return T.reshape(out, lead + (n, query.shape[-1]))
