"""scikit-learn style estimators wrapping the two training stages and the probes.

``FrameDistiller`` fits the per-frame encoder against frozen teacher targets;
``FrameMemoryModel`` freezes that encoder and fits the memory path plus the
four decoders. Both expose ``transform`` for downstream use, ``get_params`` /
``set_params`` via :class:`sklearn.base.BaseEstimator`, and checkpoint I/O.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, ViTEncoder
from .evaluation.probe import fit_linear_head
from .evaluation.propagation import PropagationConfig, propagate_labels
from .evaluation.zeroshot import zero_shot_classify
from .heads import DistillHeads, HeadConfig
from .memory import MemoryAttention, MemoryBank, memory_attend, push
from .objectives import (
    Adam,
    MeanScaler,
    ScheduleConfig,
    Stage1Weights,
    Stage2Weights,
    lr_at,
    mean_scaling,
    patch_mse_term,
    stage1_components,
    stage2_components,
    weighted_sum,
)
from .teacher import SyntheticTeacher
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# input validation


def check_frames(X, image_size: int | None = None) -> np.ndarray:
    """Coerce to a finite float array of frames ``(..., H, W, 3)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 3 or X.shape[-1] != 3:
        raise ValueError(f"expected frames shaped (..., H, W, 3), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("frames contain non-finite pixel values")
    if image_size is not None and X.shape[-3:-1] != (image_size, image_size):
        raise ValueError(f"frames are {X.shape[-3:-1]}, estimator expects {(image_size, image_size)}")
    return X


def check_videos(X, image_size: int | None = None) -> list[np.ndarray]:
    """A list of ``(T, H, W, 3)`` videos from a list of arrays or clips, or a single 5-D array."""
    if isinstance(X, np.ndarray) and X.ndim == 5:
        X = list(X)
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = [X]
    videos = [check_frames(getattr(v, "frames", v), image_size) for v in X]
    for v in videos:
        if v.ndim != 4:
            raise ValueError(f"each video must be (T, H, W, 3), got {v.shape}")
    if not videos:
        raise ValueError("no videos given")
    return videos


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {step}")


def _schedule(est) -> ScheduleConfig:
    return ScheduleConfig(est.lr, est.weight_decay, est.warmup_steps, est.restart_period, est.min_lr)


def _check_unimplemented(est) -> None:
    if getattr(est, "loss_dropout", False) or getattr(est, "grad_balancing", False):
        raise NotImplementedError("loss dropout and gradient-based loss balancing are not implemented")


def _targets_for(videos, y, teacher):
    if y is not None:
        if len(y) != len(videos):
            raise ValueError(f"{len(videos)} videos but {len(y)} target sets")
        return [(np.asarray(c), np.asarray(d)) for c, d in y]
    return [teacher.extract_batch(v) for v in videos]


# ---------------------------------------------------------------------------
# stage 1


class FrameDistiller(TransformerMixin, BaseEstimator):
    """Per-frame ViT encoder distilled from a frozen teacher.

    ``fit(X, y=None)`` takes a list of videos; ``y`` optionally supplies the
    teacher targets ``[(c_cls (T, 1, Dc), d_patch (T, N, Dd)), ...]``, otherwise
    they come from ``teacher`` (a :class:`SyntheticTeacher` by default).
    ``transform`` returns patch tokens ``(n_frames, N, D)``.
    """

    def __init__(self, image_size=64, patch_size=8, embed_dim=64, depth=4, heads=4, mlp_ratio=4.0,
                 clip_dim=32, dino_dim=32, spatial_head_depth=1, lambda_cls=1.0, lambda_patch=1.0,
                 use_mean_scaling=True, lr=1e-3, weight_decay=1e-4, warmup_steps=100, restart_period=1000,
                 min_lr=1e-5, steps=2000, batch_size=8, seed=0, teacher=None, loss_dropout=False,
                 grad_balancing=False, log_every=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.clip_dim = clip_dim
        self.dino_dim = dino_dim
        self.spatial_head_depth = spatial_head_depth
        self.lambda_cls = lambda_cls
        self.lambda_patch = lambda_patch
        self.use_mean_scaling = use_mean_scaling
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.restart_period = restart_period
        self.min_lr = min_lr
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed
        self.teacher = teacher
        self.loss_dropout = loss_dropout
        self.grad_balancing = grad_balancing
        self.log_every = log_every

    # construction helpers
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.image_size, self.patch_size, self.embed_dim, self.depth, self.heads,
                             self.mlp_ratio, self.seed)

    def head_config(self) -> HeadConfig:
        return HeadConfig(self.embed_dim, self.clip_dim, self.dino_dim, self.spatial_head_depth, self.heads,
                          self.mlp_ratio, self.seed)

    def _build(self) -> None:
        self.encoder_ = ViTEncoder(self.encoder_config())
        self.heads_ = DistillHeads(self.head_config())

    def _default_teacher(self):
        if self.teacher is not None:
            return self.teacher
        return SyntheticTeacher(self.image_size, self.patch_size, clip_dim=self.clip_dim, dino_dim=self.dino_dim)

    def trainable(self) -> dict[str, Tensor]:
        params = dict(self.encoder_.named_parameters("enc."))
        for prefix, head in self.heads_.stage1():
            params.update(head.named_parameters(prefix + "."))
        return params

    def forward(self, frames: np.ndarray):
        out = self.encoder_(frames)
        return out, self.heads_.sem_dec(out.y_cls), self.heads_.spa_dec(out.y_patch)

    def fit(self, X, y=None):
        _check_unimplemented(self)
        videos = check_videos(X, self.image_size)
        targets = _targets_for(videos, y, self._default_teacher() if y is None else None)
        frames = np.concatenate(videos)
        c_all = np.concatenate([c for c, _ in targets]).reshape(len(frames), 1, -1)
        d_all = np.concatenate([d for _, d in targets])
        self._build()
        params = self.trainable()
        opt = Adam(params, weight_decay=self.weight_decay)
        scaler = MeanScaler()
        weights = Stage1Weights(self.lambda_cls, self.lambda_patch)
        sched = _schedule(self)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 101]))
        dtype = T.default_dtype()
        self.history_ = []
        for step in range(self.steps):
            idx = rng.choice(len(frames), size=min(self.batch_size, len(frames)), replace=False)
            x = frames[idx].astype(dtype)
            _, c_hat, d_hat = self.forward(x)
            comps = stage1_components(c_hat, c_all[idx].astype(dtype), d_hat, d_all[idx].astype(dtype))
            raw = [c.item() for c in comps]
            total_raw = float(np.dot(weights.as_list(), raw))
            _check_finite(total_raw, step)
            scaled = mean_scaling(comps, scaler) if self.use_mean_scaling else comps
            loss = weighted_sum(scaled, weights.as_list())
            opt.zero_grad()
            T.backward(loss)
            lr = lr_at(step, sched)
            opt.step(lr)
            self.history_.append(
                {"step": step, "lr": lr, "loss": total_raw, "cls_term": raw[0], "patch_term": raw[1],
                 "scaled_loss": loss.item()}
            )
            if self.log_every and step % self.log_every == 0:
                log.info("stage1 step %d loss %.5f (cls %.4f patch %.4f) lr %.2e", step, total_raw, *raw, lr)
        self.optimizer_ = opt
        self.n_features_in_ = self.embed_dim
        return self

    def encode(self, X, batch_size: int = 32):
        """``(y_cls (n, 1, D), y_patch (n, N, D))`` for a stack of frames."""
        check_is_fitted(self, "encoder_")
        X = check_frames(X)
        flat = X.reshape((-1,) + X.shape[-3:])
        cls, patch = [], []
        with no_grad():
            for s in range(0, len(flat), batch_size):
                out = self.encoder_(flat[s : s + batch_size].astype(self.encoder_.pos_embed.dtype))
                cls.append(out.y_cls.data)
                patch.append(out.y_patch.data)
        lead = X.shape[:-3]
        cls = np.concatenate(cls).reshape(lead + cls[0].shape[1:])
        patch = np.concatenate(patch).reshape(lead + patch[0].shape[1:])
        return cls, patch

    def transform(self, X):
        return self.encode(X)[1]

    def predict_targets(self, X, batch_size: int = 32):
        """Decoder outputs ``(c_hat, d_hat)`` for a stack of frames."""
        check_is_fitted(self, "encoder_")
        X = check_frames(X, self.image_size)
        cs, ds = [], []
        with no_grad():
            for s in range(0, len(X), batch_size):
                _, c_hat, d_hat = self.forward(X[s : s + batch_size].astype(self.encoder_.pos_embed.dtype))
                cs.append(c_hat.data)
                ds.append(d_hat.data)
        return np.concatenate(cs), np.concatenate(ds)

    # persistence
    def config_dict(self) -> dict:
        return {k: v for k, v in self.get_params(deep=False).items() if k != "teacher"}

    def state_dict(self, include_optimizer: bool = False) -> dict[str, np.ndarray]:
        check_is_fitted(self, "encoder_")
        state = {name: p.data for name, p in self.encoder_.named_parameters("enc.")}
        for prefix, head in self.heads_.stage1():
            state.update({name: p.data for name, p in head.named_parameters(prefix + ".")})
        if include_optimizer and hasattr(self, "optimizer_"):
            state.update(self.optimizer_.state_dict())
        return state

    def save(self, path, include_optimizer: bool = False) -> None:
        save_checkpoint(path, self.state_dict(include_optimizer), {"stage": 1, "stage1": self.config_dict()})

    @classmethod
    def from_state(cls, config: dict, state: dict[str, np.ndarray]) -> "FrameDistiller":
        est = cls(**config)
        est._build()
        est.encoder_.load_state_dict(state, "enc.")
        for prefix, head in est.heads_.stage1():
            head.load_state_dict(state, prefix + ".")
        est.n_features_in_ = est.embed_dim
        return est

    @classmethod
    def load(cls, path) -> "FrameDistiller":
        config, state = load_checkpoint(path)
        return cls.from_state(config["stage1"], state)


# ---------------------------------------------------------------------------
# stage 2


class FrameMemoryModel(TransformerMixin, BaseEstimator):
    """Memory-augmented temporal model on top of a frozen :class:`FrameDistiller`.

    ``fit(X, y=None)`` takes a list of videos (frame timestamps are 1-based);
    ``transform(video)`` returns the temporally enriched patch tokens of every
    frame, computed online with a FIFO bank of ``memory_frames`` entries.
    """

    def __init__(self, encoder=None, memory_frames=5, memory_dim=64, memory_radius=0.0, heads=4, spatial_head_depth=1,
                 alpha_cls_now=0.2, alpha_cls_future=0.1, alpha_patch_now=2.0, alpha_patch_future=0.4,
                 spatial_delta=2, semantic_delta=4, use_mean_scaling=False, lr=3e-3, weight_decay=1e-4,
                 warmup_steps=100, restart_period=3000, min_lr=1e-5, steps=3000, batch_size=8, seed=0,
                 init_std=0.02, teacher=None, log_every=0):
        self.encoder = encoder
        self.memory_frames = memory_frames
        self.memory_dim = memory_dim
        self.memory_radius = memory_radius
        self.heads = heads
        self.spatial_head_depth = spatial_head_depth
        self.alpha_cls_now = alpha_cls_now
        self.alpha_cls_future = alpha_cls_future
        self.alpha_patch_now = alpha_patch_now
        self.alpha_patch_future = alpha_patch_future
        self.spatial_delta = spatial_delta
        self.semantic_delta = semantic_delta
        self.use_mean_scaling = use_mean_scaling
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.restart_period = restart_period
        self.min_lr = min_lr
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed
        self.init_std = init_std
        self.teacher = teacher
        self.log_every = log_every

    def _encoder(self) -> FrameDistiller:
        if self.encoder is None:
            raise ValueError("FrameMemoryModel needs a fitted FrameDistiller as `encoder`")
        check_is_fitted(self.encoder, "encoder_")
        return self.encoder

    def _build(self) -> None:
        enc = self._encoder()
        self.memory_ = MemoryAttention(enc.embed_dim, enc.encoder_config().num_patches, self.memory_frames,
                                       self.memory_dim, self.heads, enc.mlp_ratio, self.seed, self.init_std,
                                       self.memory_radius)
        hcfg = HeadConfig(enc.embed_dim, enc.clip_dim, enc.dino_dim, self.spatial_head_depth, self.heads,
                          enc.mlp_ratio, self.seed + 1)
        self.heads_ = DistillHeads(hcfg)

    def weights(self) -> Stage2Weights:
        return Stage2Weights(self.alpha_cls_now, self.alpha_cls_future, self.alpha_patch_now,
                             self.alpha_patch_future)

    def trainable(self) -> dict[str, Tensor]:
        params = dict(self.memory_.named_parameters("mem."))
        for prefix, head in self.heads_.all():
            params.update(head.named_parameters(prefix + "."))
        return params

    def _enriched(self, y_past: list[np.ndarray], y_now: np.ndarray, t: int) -> Tensor:
        bank = MemoryBank(self.memory_frames)
        dtype = self.memory_.proj.weight.dtype
        for i, y in enumerate(y_past):
            push(bank, Tensor(y, dtype=dtype), t - len(y_past) + i, self.memory_)
        return memory_attend(bank, Tensor(y_now, dtype=dtype), self.memory_)

    def sample_outputs(self, cls_now: np.ndarray, y_past: list[np.ndarray], y_now: np.ndarray, t: int):
        """Decoder predictions ``(c_t, c_future, d_t, d_future)`` for a batch of windows."""
        dtype = self.memory_.proj.weight.dtype
        enriched = self._enriched(y_past, y_now, t)
        cls_t = Tensor(cls_now, dtype=dtype)
        h = self.heads_
        return h.sem_dec(cls_t), h.sem_ant(cls_t), h.spa_dec(enriched), h.spa_ant(enriched)

    def _windows(self, lengths: list[int]) -> list[int]:
        far = max(self.spatial_delta, self.semantic_delta)
        longest = max(lengths)
        return [t for t in range(1, longest - far + 1)]

    def fit(self, X, y=None):
        enc = self._encoder()
        videos = check_videos(X, enc.image_size)
        teacher = None if y is not None else (self.teacher or enc._default_teacher())
        targets = _targets_for(videos, y, teacher)
        feats = [enc.encode(v) for v in videos]
        self._build()
        params = self.trainable()
        opt = Adam(params, weight_decay=self.weight_decay)
        scaler = MeanScaler()
        w = self.weights().as_list()
        sched = _schedule(self)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 202]))
        far = max(self.spatial_delta, self.semantic_delta)
        lengths = [len(v) for v in videos]
        times = self._windows(lengths)
        if not times:
            raise ValueError(f"videos are too short for a frame delta of {far}")
        dtype = T.default_dtype()
        self.history_ = []
        for step in range(self.steps):
            t = int(rng.choice(times))
            eligible = [i for i, n in enumerate(lengths) if t + far <= n]
            vids = rng.choice(eligible, size=min(self.batch_size, len(eligible)), replace=False)
            m = min(t - 1, self.memory_frames)
            past = [np.stack([feats[v][1][p - 1] for v in vids]) for p in range(t - m, t)]
            y_now = np.stack([feats[v][1][t - 1] for v in vids])
            cls_now = np.stack([feats[v][0][t - 1] for v in vids])
            preds = self.sample_outputs(cls_now, past, y_now, t)
            tg = [np.stack([targets[v][0][t - 1] for v in vids]).reshape(len(vids), 1, -1),
                  np.stack([targets[v][0][t - 1 + self.semantic_delta] for v in vids]).reshape(len(vids), 1, -1),
                  np.stack([targets[v][1][t - 1] for v in vids]),
                  np.stack([targets[v][1][t - 1 + self.spatial_delta] for v in vids])]
            tg = [a.astype(dtype) for a in tg]
            comps = stage2_components(preds[0], tg[0], preds[1], tg[1], preds[2], tg[2], preds[3], tg[3])
            raw = [c.item() for c in comps]
            total_raw = float(np.dot(w, raw))
            _check_finite(total_raw, step)
            scaled = mean_scaling(comps, scaler) if self.use_mean_scaling else comps
            loss = weighted_sum(scaled, w)
            opt.zero_grad()
            T.backward(loss)
            lr = lr_at(step, sched)
            opt.step(lr)
            self.history_.append(
                {"step": step, "lr": lr, "loss": total_raw, "cls_now": raw[0], "cls_future": raw[1],
                 "patch_now": raw[2], "patch_future": raw[3], "scaled_loss": loss.item()}
            )
            if self.log_every and step % self.log_every == 0:
                log.info("stage2 step %d loss %.5f lr %.2e", step, total_raw, lr)
        self.optimizer_ = opt
        self.n_features_in_ = enc.embed_dim
        return self

    def _online(self, video):
        """Per-frame (cls, enriched patches) with the bank filled as the video streams."""
        check_is_fitted(self, "memory_")
        cls, patch = self._encoder().encode(check_frames(video))
        bank = MemoryBank(self.memory_frames)
        dtype = self.memory_.proj.weight.dtype
        out = []
        with no_grad():
            for i in range(len(patch)):
                cur = Tensor(patch[i], dtype=dtype)
                out.append(memory_attend(bank, cur, self.memory_).data)
                push(bank, cur, i + 1, self.memory_)
        return cls, np.stack(out)

    def transform(self, X):
        """Enriched patch tokens ``(T, N, D)`` for one video (or a list of videos)."""
        if isinstance(X, list) or (isinstance(X, np.ndarray) and X.ndim == 5):
            return [self._online(v)[1] for v in X]
        return self._online(X)[1]

    def predict_future_patches(self, video) -> np.ndarray:
        """Spatial-anticipator output for each frame, aligned with frame ``t + spatial_delta``."""
        cls, enriched = self._online(video)
        with no_grad():
            return self.heads_.spa_ant(Tensor(enriched, dtype=self.memory_.proj.weight.dtype)).data

    def predict_semantic(self, video) -> np.ndarray:
        """Current-frame class-space vectors ``(T, 1, Dc)`` from the semantic decoder."""
        cls, _ = self._encoder().encode(check_frames(video))
        with no_grad():
            return self.heads_.sem_dec(Tensor(cls, dtype=self.memory_.proj.weight.dtype)).data

    def anticipation_mse(self, videos, y=None) -> float:
        """Mean future patch error over all frames that have a ``t + spatial_delta`` target."""
        enc = self._encoder()
        videos = check_videos(videos, enc.image_size)
        teacher = None if y is not None else (self.teacher or enc._default_teacher())
        targets = _targets_for(videos, y, teacher)
        errs = []
        for v, (_, d) in zip(videos, targets):
            pred = self.predict_future_patches(v)
            k = self.spatial_delta
            if len(v) <= k:
                continue
            with no_grad():
                errs.append(patch_mse_term(Tensor(pred[:-k], dtype=np.float64), d[k:].astype(np.float64)).item())
        return float(np.mean(errs))

    # persistence
    def config_dict(self) -> dict:
        return {k: v for k, v in self.get_params(deep=False).items() if k not in ("encoder", "teacher")}

    def state_dict(self, include_optimizer: bool = False) -> dict[str, np.ndarray]:
        check_is_fitted(self, "memory_")
        enc = self._encoder()
        state = {name: p.data for name, p in enc.encoder_.named_parameters("enc.")}
        state.update({name: p.data for name, p in self.memory_.named_parameters("mem.")})
        for prefix, head in self.heads_.all():
            state.update({name: p.data for name, p in head.named_parameters(prefix + ".")})
        if include_optimizer and hasattr(self, "optimizer_"):
            state.update(self.optimizer_.state_dict())
        return state

    def save(self, path, include_optimizer: bool = False) -> None:
        enc = self._encoder()
        config = {"stage": 2, "stage1": enc.config_dict(), "stage2": self.config_dict()}
        save_checkpoint(path, self.state_dict(include_optimizer), config)

    @classmethod
    def load(cls, path) -> "FrameMemoryModel":
        config, state = load_checkpoint(path)
        if config.get("stage") != 2:
            raise ValueError(f"{path} is not a stage-2 checkpoint")
        enc = FrameDistiller(**config["stage1"])
        enc._build()
        enc.encoder_.load_state_dict(state, "enc.")
        enc.n_features_in_ = enc.embed_dim
        est = cls(encoder=enc, **config["stage2"])
        est._build()
        est.memory_.load_state_dict(state, "mem.")
        for prefix, head in est.heads_.all():
            head.load_state_dict(state, prefix + ".")
        est.n_features_in_ = enc.embed_dim
        return est


# ---------------------------------------------------------------------------
# downstream estimators


class LabelPropagator(BaseEstimator):
    """k-NN label propagation; stateless, so ``fit`` only validates parameters."""

    def __init__(self, k=5, temperature=0.1, context_frames=1, radius=12.0):
        self.k = k
        self.temperature = temperature
        self.context_frames = context_frames
        self.radius = radius

    def config(self) -> PropagationConfig:
        return PropagationConfig(self.k, self.temperature, self.context_frames, self.radius)

    def fit(self, X=None, y=None):
        self.config_ = self.config()
        return self

    def predict_proba(self, features, gt0, num_labels=None) -> np.ndarray:
        return propagate_labels(features, gt0, self.config(), num_labels).soft

    def predict(self, features, gt0, num_labels=None) -> np.ndarray:
        return propagate_labels(features, gt0, self.config(), num_labels).hard


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Per-patch softmax-linear classifier on frozen features."""

    def __init__(self, epochs=50, lr=0.05, batch_size=4096, weight_decay=0.0, seed=0):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        self.head_ = fit_linear_head(X, y, self.epochs, self.lr, self.batch_size, self.weight_decay, self.seed)
        self.classes_ = self.head_.classes
        self.n_features_in_ = X.shape[-1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        X = np.asarray(X, dtype=np.float64)
        return self.head_.predict_proba(X).reshape(X.shape[:-1] + (len(self.classes_),))

    def predict(self, X):
        check_is_fitted(self, "head_")
        X = np.asarray(X, dtype=np.float64)
        return self.head_.predict(X).reshape(X.shape[:-1])


class ZeroShotClassifier(ClassifierMixin, BaseEstimator):
    """Nearest label embedding (cosine) to the mean projected [CLS] vector of a video."""

    def fit(self, label_embeddings, y=None):
        emb = np.asarray(label_embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ValueError(f"label embeddings must be (L, Dc), got {emb.shape}")
        self.label_embeddings_ = emb
        self.classes_ = np.arange(len(emb)) if y is None else np.asarray(y)
        return self

    def predict(self, cls_sequences):
        check_is_fitted(self, "label_embeddings_")
        return np.array([self.classes_[zero_shot_classify(seq, self.label_embeddings_)] for seq in cls_sequences])
