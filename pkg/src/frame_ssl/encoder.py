"""Per-frame ViT encoder: patch embedding, [CLS] token, learned positions, pre-norm blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import zoom

from . import tensor as T
from .nn import INIT_STD, Block, ConfigError, Linear, Module, trunc_normal, zeros
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    y_cls: Tensor  # (..., 1, D)
    y_patch: Tensor  # (..., N, D)
    timestamp: int | None = None


def patchify(x: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``(..., H, W, C)`` images into raster-ordered flattened ``P x P x C`` blocks.

    >>> patchify(np.zeros((32, 32, 3)), 8).shape
    (16, 192)
    """
    x = np.asarray(x)
    *lead, h, w, c = x.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = x.reshape(*lead, gh, p, gw, p, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * gw, p * p * c)


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int, channels: int = 3) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    *lead, n, _ = patches.shape
    p = patch_size
    gh, gw = height // p, width // p
    if gh * gw != n:
        raise DimensionError(f"{n} patches cannot tile a {height}x{width} image with P={p}")
    x = patches.reshape(*lead, gh, gw, p, p, channels)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, height, width, channels)


def interpolate_pos_embed(pos: np.ndarray, old_grid: tuple[int, int], new_grid: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample the patch part of a ``(1 + gh*gw, D)`` position table."""
    if tuple(old_grid) == tuple(new_grid):
        return pos
    cls, grid = pos[:1], pos[1:]
    d = grid.shape[-1]
    grid = grid.reshape(old_grid[0], old_grid[1], d)
    factors = (new_grid[0] / old_grid[0], new_grid[1] / old_grid[1], 1.0)
    resized = zoom(grid, factors, order=1, mode="nearest", grid_mode=True)
    return np.concatenate([cls, resized.reshape(-1, d).astype(pos.dtype)], axis=0)


class ViTEncoder(Module):
    def __init__(self, cfg: EncoderConfig, std: float = INIT_STD, name: str = "enc"):
        self._cfg = cfg
        s = cfg.seed
        d = cfg.embed_dim
        self.patch_embed = Linear(3 * cfg.patch_size**2, d, s, name + ".patch_embed", std)
        self.cls_token = zeros((1, d), name + ".cls_token")
        self.pos_embed = trunc_normal((cfg.num_patches + 1, d), s, name + ".pos_embed", std)
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, s, f"{name}.blocks.{i}", std) for i in range(cfg.depth)]

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    def embed(self, frames: np.ndarray) -> Tensor:
        """Token sequence z0 = [CLS; patch embeddings] + positions, shape ``(..., N+1, D)``."""
        frames = np.asarray(frames)
        cfg = self._cfg
        if frames.shape[-1] != 3 or frames.ndim < 3:
            raise DimensionError(f"expected (..., H, W, 3) frames, got {frames.shape}")
        h, w = frames.shape[-3:-1]
        patches = Tensor(patchify(frames, cfg.patch_size), dtype=self.pos_embed.dtype)
        tokens = self.patch_embed(patches)
        lead = tokens.shape[:-2]
        cls = T.broadcast_leading(self.cls_token, lead) if lead else self.cls_token
        z = T.concat([cls, tokens], axis=-2)
        grid = (h // cfg.patch_size, w // cfg.patch_size)
        if grid == (cfg.grid, cfg.grid):
            pos = self.pos_embed
        else:
            pos = Tensor(
                interpolate_pos_embed(self.pos_embed.data, (cfg.grid, cfg.grid), grid),
                dtype=self.pos_embed.dtype,
            )
        return T.add_trailing(z, pos)

    def __call__(self, frames: np.ndarray, timestamp: int | None = None) -> EncoderOutput:
        z = self.embed(frames)
        for blk in self.blocks:
            z = blk(z)
        n = z.ndim
        index_cls = (slice(None),) * (n - 2) + (slice(0, 1),)
        index_patch = (slice(None),) * (n - 2) + (slice(1, None),)
        return EncoderOutput(T.take(z, index_cls), T.take(z, index_patch), timestamp)


def encode(frame: np.ndarray, cfg: EncoderConfig, params: ViTEncoder, timestamp: int | None = None) -> EncoderOutput:
    """Encode one frame ``(H, W, 3)`` (or a batch) with ``params`` built for ``cfg``."""
    if params.config != cfg:
        raise ConfigError("encoder parameters were built for a different configuration")
    frame = np.asarray(frame)
    if frame.shape[-3:] != (cfg.image_size, cfg.image_size, 3):
        raise DimensionError(
            f"frame shape {frame.shape[-3:]} does not match configured "
            f"{(cfg.image_size, cfg.image_size, 3)}"
        )
    return params(frame, timestamp)
