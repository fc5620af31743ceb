"""Flat ``key = value`` run configuration shared by every CLI command.

Resolution order, later wins: field defaults, the ``--config`` file,
the ``FRAME_SEED`` environment variable (seed only), ``--key=value`` flags.
Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

SEED_ENV = "FRAME_SEED"


class ConfigKeyError(KeyError):
    """A key that RunConfig does not define."""

    def __str__(self):
        return str(self.args[0])


@dataclass
class RunConfig:
    # reproducibility and data
    seed: int = 0
    threads: int = 1
    deterministic: bool = False
    data: str = ""  # directory of clip folders; empty means generate synthetic clips
    clips: int = 16
    heldout_clips: int = 4
    stage2_clips: int = 256
    frames: int = 16
    n_objects: int = 2
    max_speed: int = 2
    n_labels: int = 4
    occluder: bool = False
    checkpoint: str = ""
    # encoder and heads
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    clip_dim: int = 32
    dino_dim: int = 32
    spatial_head_depth: int = 1
    # teacher
    teacher_cache: str = ""
    teacher_seed: int = 1234
    teacher_depth: int = 2
    teacher_init_std: float = 0.1
    # stage 1
    lambda_cls: float = 1.0
    lambda_patch: float = 1.0
    stage1_steps: int = 2000
    stage1_lr: float = 1e-3
    stage1_mean_scaling: bool = True
    batch_size: int = 8
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    restart_period: int = 1000
    min_lr: float = 1e-5
    # stage 2
    memory_frames: int = 5
    memory_dim: int = 64
    memory_radius: str = "0"  # grid cells, or "none" for unrestricted attention
    alpha_cls_now: float = 0.2
    alpha_cls_future: float = 0.1
    alpha_patch_now: float = 2.0
    alpha_patch_future: float = 0.4
    spatial_delta: int = 2
    semantic_delta: int = 4
    stage2_steps: int = 3000
    stage2_lr: float = 3e-3
    stage2_restart_period: int = 3000
    stage2_mean_scaling: bool = False
    # evaluation
    features: str = "auto"  # auto | stage1 | stage2 | stub
    k: int = 5
    temperature: float = 0.1
    context_frames: int = 1
    radius: float = 12.0
    probe_epochs: int = 50
    probe_lr: float = 0.05
    region_reference: str = "first"
    drift_max_delta: int = 8
    export_labels: bool = False
    svg: bool = False
    # feature caches
    cache: str = ""
    source: str = ""
    dump_source: str = "teacher"  # teacher | model
    log_every: int = 0

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, values: dict[str, str]) -> "RunConfig":
        """Return a copy with string values parsed to each field's type."""
        known = {f.name: f for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigKeyError(f"unknown config key {key!r}")
            parsed[name] = parse_value(known[name].type, raw, name)
        return dataclasses.replace(self, **parsed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            lines.append(f"{f.name} = {format_value(val)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "config.txt"
        path.write_text(self.to_text())
        return path

    @property
    def memory_radius_value(self) -> float | None:
        text = self.memory_radius.strip().lower()
        return None if text in ("none", "global") else float(text)


def parse_value(kind, raw, name: str = "value"):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ValueError(f"config key {name!r}: cannot parse {raw!r} as {kind}") from None
    return text


def format_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    return str(val)


def read_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are skipped."""
    out = {}
    for num, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {num}: expected key = value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def resolve(config_path: str | None = None, overrides: dict[str, str] | None = None,
            environ=None) -> RunConfig:
    cfg = RunConfig()
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        cfg = cfg.update(read_config_text(path.read_text()))
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        cfg = cfg.update({"seed": environ[SEED_ENV]})
    if overrides:
        cfg = cfg.update(overrides)
    return cfg
