"""Zero-shot video classification in the class-vector space."""

from __future__ import annotations

import numpy as np


def video_embedding(cls_sequence) -> np.ndarray:
    """Mean of the per-frame projected [CLS] vectors."""
    seq = np.asarray([np.asarray(c, dtype=np.float64).reshape(-1) for c in cls_sequence])
    if seq.size == 0:
        raise ValueError("need at least one frame")
    return seq.mean(axis=0)


def similarity_table(video: np.ndarray, label_embeddings: np.ndarray) -> np.ndarray:
    labels = np.asarray(label_embeddings, dtype=np.float64)
    vnorm = np.linalg.norm(video)
    if vnorm == 0:
        raise ValueError("video embedding has zero norm")
    lnorm = np.linalg.norm(labels, axis=-1)
    if np.any(lnorm == 0):
        raise ValueError("label embeddings must be nonzero")
    return (labels / lnorm[:, None]) @ (video / vnorm)


def zero_shot_classify(cls_sequence, label_embeddings) -> int:
    """Index of the label embedding most cosine-similar to the mean frame vector (lowest index on ties)."""
    return int(np.argmax(similarity_table(video_embedding(cls_sequence), label_embeddings)))
