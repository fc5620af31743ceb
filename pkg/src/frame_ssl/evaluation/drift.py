"""Temporal drift of teacher targets as a function of frame offset."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise ``1 - cos``; exactly 0 where the rows are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = (a * b).sum(-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    dist = 1.0 - num / np.maximum(den, 1e-300)
    return np.where((a == b).all(-1), 0.0, dist)


def mean_drift(c: np.ndarray, d: np.ndarray, k: int) -> tuple[float, float]:
    """Mean class-vector and mean patch-averaged cosine distance between frames ``t`` and ``t + k``."""
    if k == 0:
        return 0.0, 0.0
    T_ = len(c)
    if k >= T_:
        raise ValueError(f"offset {k} needs more than {T_} frames")
    cls = [float(cosine_distance(c[t].reshape(-1), c[t + k].reshape(-1))) for t in range(T_ - k)]
    patch = [float(cosine_distance(d[t], d[t + k]).mean()) for t in range(T_ - k)]
    return float(np.mean(cls)), float(np.mean(patch))


def feature_drift_profile(targets, max_delta: int, patches=None) -> list[tuple[int, float, float]]:
    """Rows ``(k, class distance, patch distance)`` for ``k = 1..max_delta``.

    ``targets`` is either a list of :class:`~frame_ssl.teacher.TeacherTargets`
    or a stacked class array ``(T, 1, Dc)`` with ``patches`` ``(T, N, Dd)``.
    """
    if patches is None:
        c = np.stack([np.asarray(x.c_cls) for x in targets])
        d = np.stack([np.asarray(x.d_patch) for x in targets])
    else:
        c, d = np.asarray(targets), np.asarray(patches)
    if len(c) <= max_delta:
        raise ValueError(f"video of {len(c)} frames is too short for max_delta={max_delta}")
    return [(k,) + mean_drift(c, d, k) for k in range(1, max_delta + 1)]


def write_drift_csv(rows, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "cls_distance", "patch_distance"])
        for k, cd, pd in rows:
            w.writerow([k, repr(cd), repr(pd)])
