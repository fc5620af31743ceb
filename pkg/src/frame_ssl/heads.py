"""Lightweight decoders mapping encoder tokens into teacher feature spaces."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .nn import INIT_STD, Block, ConfigError, Linear, Module
from .tensor import DimensionError, Tensor

HEAD_PREFIXES = ("sem_dec", "spa_dec", "sem_ant", "spa_ant")


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int = 64
    clip_dim: int = 32
    dino_dim: int = 32
    spatial_head_depth: int = 1
    heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.spatial_head_depth < 1:
            raise ConfigError("spatial_head_depth must be >= 1")
        if self.input_dim % self.heads:
            raise ConfigError(f"input_dim {self.input_dim} not divisible by {self.heads} heads")

    def to_dict(self) -> dict:
        return asdict(self)


class SemanticDecoder(Module):
    """Single affine map from the [CLS] token to the class-vector space."""

    def __init__(self, cfg: HeadConfig, name: str = "sem_dec", std: float = INIT_STD):
        self.proj = Linear(cfg.input_dim, cfg.clip_dim, cfg.seed, name + ".proj", std)

    def __call__(self, y_cls: Tensor) -> Tensor:
        return self.proj(y_cls)


class SpatialDecoder(Module):
    """Transformer block(s) over patch tokens followed by a projection to the patch-feature space."""

    def __init__(self, cfg: HeadConfig, name: str = "spa_dec", std: float = INIT_STD):
        self.blocks = [
            Block(cfg.input_dim, cfg.heads, cfg.mlp_ratio, cfg.seed, f"{name}.blocks.{i}", std)
            for i in range(cfg.spatial_head_depth)
        ]
        self.proj = Linear(cfg.input_dim, cfg.dino_dim, cfg.seed, name + ".proj", std)

    def __call__(self, y_patch: Tensor) -> Tensor:
        x = y_patch
        for blk in self.blocks:
            x = blk(x)
        return self.proj(x)


def decode_semantic(y_cls: Tensor, params: SemanticDecoder) -> Tensor:
    if y_cls.shape[-1] != params.proj.weight.shape[0]:
        raise DimensionError(f"semantic decoder expects width {params.proj.weight.shape[0]}, got {y_cls.shape}")
    return params(y_cls)


def decode_spatial(y_patch: Tensor, params: SpatialDecoder) -> Tensor:
    if y_patch.shape[-1] != params.proj.weight.shape[0]:
        raise DimensionError(f"spatial decoder expects width {params.proj.weight.shape[0]}, got {y_patch.shape}")
    return params(y_patch)


class DistillHeads(Module):
    """The four decoders. Stage 1 uses only the first two."""

    def __init__(self, cfg: HeadConfig, std: float = INIT_STD):
        self._cfg = cfg
        self.sem_dec = SemanticDecoder(cfg, "sem_dec", std)
        self.spa_dec = SpatialDecoder(cfg, "spa_dec", std)
        self.sem_ant = SemanticDecoder(cfg, "sem_ant", std)
        self.spa_ant = SpatialDecoder(cfg, "spa_ant", std)

    @property
    def config(self) -> HeadConfig:
        return self._cfg

    def stage1(self) -> list[tuple[str, Module]]:
        return [("sem_dec", self.sem_dec), ("spa_dec", self.spa_dec)]

    def all(self) -> list[tuple[str, Module]]:
        return [(p, getattr(self, p)) for p in HEAD_PREFIXES]
