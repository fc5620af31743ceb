"""Distillation losses, running-mean loss scaling, the LR schedule and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class Stage1Weights:
    cls: float = 1.0
    patch: float = 1.0

    def __post_init__(self):
        if self.cls < 0 or self.patch < 0:
            raise ValueError("loss weights must be nonnegative")

    def as_list(self) -> list[float]:
        return [self.cls, self.patch]


@dataclass(frozen=True)
class Stage2Weights:
    cls_now: float = 0.2
    cls_future: float = 0.1
    patch_now: float = 2.0
    patch_future: float = 0.4

    def __post_init__(self):
        if min(self.as_list()) < 0:
            raise ValueError("loss weights must be nonnegative")

    def as_list(self) -> list[float]:
        return [self.cls_now, self.cls_future, self.patch_now, self.patch_future]


def _const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x.detach()
    return Tensor(x)


def cosine_term(pred: Tensor, target) -> Tensor:
    """Batch mean of ``1 - cos(target, pred)`` along the last axis; ``target`` is treated as constant."""
    target = _const(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    tnorm = np.sqrt((target.data * target.data).sum(axis=-1, keepdims=True))
    if np.any(tnorm == 0):
        raise ValueError("teacher class vector has zero norm")
    pnorm_raw = np.sqrt((pred.data * pred.data).sum(axis=-1))
    if np.any(pnorm_raw == 0):
        raise ValueError("predicted class vector has zero norm")
    dot = T.sum(pred * target, axis=-1, keepdims=True)
    pnorm = T.sqrt(T.sum(T.square(pred), axis=-1, keepdims=True))
    cos = dot / (pnorm * Tensor._wrap(tnorm.astype(pred.dtype)))
    return 1.0 - T.mean(cos)


def patch_mse_term(pred: Tensor, target) -> Tensor:
    """Sum over patches of squared L2 errors divided by N, averaged over any leading batch axes."""
    target = _const(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    n_patch = pred.shape[-2]
    batch = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    return T.scale(T.sum(T.square(pred - target)), 1.0 / (n_patch * batch))


def stage1_components(c_hat, c, d_hat, d) -> list[Tensor]:
    return [cosine_term(c_hat, c), patch_mse_term(d_hat, d)]


def stage1_loss(c_hat: Tensor, c, d_hat: Tensor, d, w: Stage1Weights = Stage1Weights()) -> Tensor:
    """``w.cls * (1 - cos(c, c_hat)) + w.patch * sum_patch ||d - d_hat||^2 / N``."""
    cos_t, mse_t = stage1_components(c_hat, c, d_hat, d)
    return w.cls * cos_t + w.patch * mse_t


def stage2_components(c_hat_t, c_t, c_hat_f, c_f, d_hat_t, d_t, d_hat_f, d_f) -> list[Tensor]:
    return [
        cosine_term(c_hat_t, c_t),
        cosine_term(c_hat_f, c_f),
        patch_mse_term(d_hat_t, d_t),
        patch_mse_term(d_hat_f, d_f),
    ]


def stage2_loss(c_hat_t, c_t, c_hat_f, c_f, d_hat_t, d_t, d_hat_f, d_f,
                w: Stage2Weights = Stage2Weights()) -> Tensor:
    """Weighted sum of current/future cosine terms and current/future patch MSE terms."""
    comps = stage2_components(c_hat_t, c_t, c_hat_f, c_f, d_hat_t, d_t, d_hat_f, d_f)
    return weighted_sum(comps, w.as_list())


def weighted_sum(components: list[Tensor], weights: list[float]) -> Tensor:
    total = None
    for comp, wt in zip(components, weights):
        term = T.scale(comp, wt)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# mean scaling


@dataclass
class MeanScaler:
    """Exponential running means of loss-component magnitudes, seeded by the first batch."""

    decay: float = 0.99
    eps: float = 1e-8
    means: list[float] | None = None

    def update(self, values: list[float]) -> list[float]:
        mags = [abs(float(v)) for v in values]
        if self.means is None:
            self.means = mags
        else:
            if len(mags) != len(self.means):
                raise ValueError(f"expected {len(self.means)} components, got {len(mags)}")
            self.means = [self.decay * m + (1 - self.decay) * v for m, v in zip(self.means, mags)]
        return list(self.means)


def mean_scaling(components: list[Tensor], running_means: MeanScaler) -> list[Tensor]:
    """Divide each component by its running mean magnitude (a constant w.r.t. gradients)."""
    means = running_means.update([c.item() for c in components])
    return [T.scale(c, 1.0 / (m + running_means.eps)) for c, m in zip(components, means)]


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 0
    restart_period: int = 1000
    min_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.restart_period <= 0:
            raise ValueError("restart_period must be > 0")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warm-up to ``base_lr``, then cosine decay to ``min_lr`` restarting every period."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    pos = (step - cfg.warmup_steps) % cfg.restart_period
    frac = pos / cfg.restart_period
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float, weight_decay: float = 0.0,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One Adam update with decoupled weight decay, in place on ``params``."""
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {g.shape} does not match parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        new = p.data
        if weight_decay:
            new = new - lr * weight_decay * new
        p.data = (new - lr * update).astype(p.dtype)
    return state


class Adam:
    """Adam over a fixed dict of named parameters."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, lr: float) -> None:
        grads = {name: p.grad for name, p in self.params.items()}
        adam_step(self.params, grads, self.state, lr, self.weight_decay, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([self.state.step], dtype=np.float64)}
        for name in self.params:
            if name in self.state.m:
                out[f"opt.m.{name}"] = self.state.m[name]
                out[f"opt.v.{name}"] = self.state.v[name]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if "opt.step" in state:
            self.state.step = int(np.asarray(state["opt.step"]).reshape(-1)[0])
        for name in self.params:
            if f"opt.m.{name}" in state:
                self.state.m[name] = np.array(state[f"opt.m.{name}"])
                self.state.v[name] = np.array(state[f"opt.v.{name}"])
