"""Region tracking by cosine matching of mean-pooled patch features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TrackResult:
    assignments: np.ndarray  # (T, R) proposal index per frame, -1 where the frame had no proposals
    gaps: list[int]  # frames without proposals

    def label_grids(self, proposals, masks0, grid_shape) -> np.ndarray:
        """Per-frame grids labelling region ``r`` as ``r + 1``; lower region index wins overlaps."""
        T_, R = self.assignments.shape
        out = np.zeros((T_,) + tuple(grid_shape), dtype=np.int64)
        for t in range(T_):
            for r in reversed(range(R)):
                a = self.assignments[t, r]
                if t == 0:
                    m = np.asarray(masks0[r], dtype=bool)
                elif a < 0:
                    continue
                else:
                    m = np.asarray(proposals[t][a], dtype=bool)
                out[t][m.reshape(grid_shape)] = r + 1
        return out


def pool_region(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise ValueError("cannot pool an empty region")
    return np.asarray(features, dtype=np.float64)[mask].mean(axis=0)


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / max(np.linalg.norm(a), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    return b @ a


def track_regions(features, masks0, proposals, reference: str = "first") -> TrackResult:
    """Follow each first-frame region through the video.

    ``features`` is a sequence of ``(N, D)`` patch features, ``masks0`` a list
    of first-frame region masks over the N patches and ``proposals[t]`` the
    candidate region masks of frame ``t``. With ``reference="first"`` every
    frame is matched against the first-frame pooled feature; with
    ``"previous"`` the reference is replaced by the last matched region.
    Equal similarities resolve to the lowest proposal index.
    """
    if reference not in ("first", "previous"):
        raise ValueError(f"unknown reference mode {reference!r}")
    refs = [pool_region(features[0], m) for m in masks0]
    T_ = len(features)
    R = len(masks0)
    assign = np.full((T_, R), -1, dtype=np.int64)
    assign[0] = np.arange(R)
    gaps = []
    for t in range(1, T_):
        props = [np.asarray(p, dtype=bool) for p in (proposals[t] if t < len(proposals) else [])]
        usable = [p.any() for p in props]
        if not any(usable):
            gaps.append(t)
            continue
        dim = len(refs[0])
        pooled = np.stack([pool_region(features[t], p) if ok else np.zeros(dim) for p, ok in zip(props, usable)])
        for r in range(R):
            sims = np.where(usable, _cos(refs[r], pooled), -np.inf)
            best = int(np.argmax(sims))
            assign[t, r] = best
            if reference == "previous":
                refs[r] = pooled[best]
    return TrackResult(assign, gaps)
