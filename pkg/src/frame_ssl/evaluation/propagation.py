"""Patchwise k-nearest-neighbour label propagation through a video."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PropagationConfig:
    k: int = 5
    temperature: float = 0.1
    context_frames: int = 1
    radius: float = 12.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.context_frames < 0:
            raise ValueError("context_frames must be >= 0")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")


@dataclass
class PropagationResult:
    soft: np.ndarray  # (T, N, L) label distributions
    grid_shape: tuple[int, int]

    @property
    def hard(self) -> np.ndarray:
        """Argmax labels ``(T, gh, gw)``; ties resolve to the lowest label."""
        return self.soft.argmax(-1).reshape((len(self.soft),) + self.grid_shape)


def one_hot(labels: np.ndarray, num_labels: int) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    out = np.zeros((labels.size, num_labels))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def grid_distances(grid_shape: tuple[int, int]) -> np.ndarray:
    gh, gw = grid_shape
    yy, xx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    pos = np.stack([yy.ravel(), xx.ravel()], axis=-1).astype(np.float64)
    return np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))


def context_indices(t: int, context_frames: int) -> list[int]:
    """First frame plus up to ``context_frames`` immediately preceding frames."""
    return sorted({0} | set(range(max(0, t - context_frames), t)))


def propagate_step(target: np.ndarray, ctx_feats: list[np.ndarray], ctx_labels: list[np.ndarray],
                   local: np.ndarray, k: int, temperature: float) -> np.ndarray:
    """Soft labels for one target frame from its context set.

    ``target`` and each context feature block are L2-normalized ``(N, D)``;
    ``local`` is the ``(N, N)`` boolean neighbourhood mask.
    """
    if not ctx_feats:
        raise ValueError("propagation context is empty")
    aff = np.concatenate([target @ f.T for f in ctx_feats], axis=1)
    allowed = np.concatenate([local] * len(ctx_feats), axis=1)
    aff = np.where(allowed, aff, -np.inf)
    labels = np.concatenate(ctx_labels, axis=0)
    kk = min(k, aff.shape[1])
    order = np.argsort(-aff, axis=1, kind="stable")[:, :kk]
    top = np.take_along_axis(aff, order, axis=1)
    if np.any(~np.isfinite(top[:, 0])):
        raise ValueError("propagation context is empty for some patch (radius too small)")
    z = (top - top[:, :1]) / temperature
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("nk,nkl->nl", w, labels[order])


def propagate_labels(features, gt0: np.ndarray, cfg: PropagationConfig = PropagationConfig(),
                     num_labels: int | None = None) -> PropagationResult:
    """Carry first-frame labels through ``features`` (``T`` arrays of shape ``(N, D)``).

    ``gt0`` is the first frame's label grid ``(gh, gw)``. Each later frame takes,
    per patch, the temperature-softmax over its ``k`` most cosine-similar
    context patches within ``cfg.radius`` grid cells and averages their soft
    labels. Ties in affinity go to the earlier context entry.
    """
    feats = [_normalize(f) for f in features]
    gt0 = np.asarray(gt0)
    grid_shape = gt0.shape
    n = gt0.size
    if any(f.shape[0] != n for f in feats):
        raise ValueError(f"feature rows must equal the {n} patches of gt0")
    num_labels = int(gt0.max()) + 1 if num_labels is None else num_labels
    local = grid_distances(grid_shape) <= cfg.radius
    soft = np.zeros((len(feats), n, num_labels))
    soft[0] = one_hot(gt0, num_labels)
    for t in range(1, len(feats)):
        ctx = context_indices(t, cfg.context_frames)
        soft[t] = propagate_step(feats[t], [feats[c] for c in ctx], [soft[c] for c in ctx],
                                 local, cfg.k, cfg.temperature)
    return PropagationResult(soft, grid_shape)


def keypoints_to_grid(keypoints: np.ndarray, grid_shape: tuple[int, int], patch_size: int) -> np.ndarray:
    """One patch per visible keypoint, labelled ``j + 1``; later keypoints win shared patches."""
    grid = np.zeros(grid_shape, dtype=np.int64)
    for j, (y, x) in enumerate(np.asarray(keypoints, dtype=np.float64)):
        if np.isnan(y) or np.isnan(x):
            continue
        gy = int(np.clip(y // patch_size, 0, grid_shape[0] - 1))
        gx = int(np.clip(x // patch_size, 0, grid_shape[1] - 1))
        grid[gy, gx] = j + 1
    return grid


def keypoints_from_soft(soft: np.ndarray, num_keypoints: int, grid_shape: tuple[int, int],
                        patch_size: int) -> np.ndarray:
    """Read keypoints back as the centre of the patch with the highest mass for each keypoint label."""
    out = np.zeros((num_keypoints, 2))
    gw = grid_shape[1]
    for j in range(num_keypoints):
        idx = int(np.argmax(soft[:, j + 1]))
        out[j] = ((idx // gw) + 0.5) * patch_size, ((idx % gw) + 0.5) * patch_size
    return out
