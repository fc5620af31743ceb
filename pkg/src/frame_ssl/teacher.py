"""Frozen teacher targets: a seeded synthetic teacher and an on-disk feature cache."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, ViTEncoder
from .nn import Linear, Module
from .tensor import no_grad

CACHE_MAGIC = b"FRAMEfeat"
CACHE_VERSION = 1
_HEADER = struct.Struct("<9sHBIIII")  # magic, version, bytes per real, Dc, Dd, N, frames


class DataError(ValueError):
    """Malformed or out-of-range input data."""


@dataclass
class TeacherTargets:
    c_cls: np.ndarray  # (1, Dc)
    d_patch: np.ndarray  # (N, Dd)
    t: int | None = None

    def __post_init__(self):
        if not np.any(self.c_cls):
            raise DataError(f"teacher class vector of frame {self.t} has zero norm")


class SyntheticTeacher(Module):
    """Seeded, randomly initialized ViT with linear heads, frozen at construction.

    Stands in for real image teachers: targets are fixed, deterministic,
    non-trivial functions of the frame.
    """

    def __init__(self, image_size: int = 64, patch_size: int = 8, embed_dim: int = 64, depth: int = 2,
                 heads: int = 4, clip_dim: int = 32, dino_dim: int = 32, seed: int = 1234,
                 init_std: float = 0.1):
        self._cfg = EncoderConfig(image_size, patch_size, embed_dim, depth, heads, 4.0, seed)
        self.vit = ViTEncoder(self._cfg, std=init_std, name="teacher")
        self.cls_head = Linear(embed_dim, clip_dim, seed, "teacher.cls_head", std=1.0 / np.sqrt(embed_dim))
        self.patch_head = Linear(embed_dim, dino_dim, seed, "teacher.patch_head", std=1.0 / np.sqrt(embed_dim))
        self.requires_grad_(False)

    @property
    def clip_dim(self) -> int:
        return self.cls_head.weight.shape[1]

    @property
    def dino_dim(self) -> int:
        return self.patch_head.weight.shape[1]

    @property
    def num_patches(self) -> int:
        return self._cfg.num_patches

    def extract_batch(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Targets for a stack of frames: ``(B, 1, Dc)`` class vectors and ``(B, N, Dd)`` patch grids."""
        with no_grad():
            out = self.vit(np.asarray(frames))
            c = self.cls_head(out.y_cls).data
            d = self.patch_head(out.y_patch).data
        return c, d

    def __call__(self, frame: np.ndarray, t: int | None = None) -> TeacherTargets:
        c, d = self.extract_batch(np.asarray(frame)[None])
        return TeacherTargets(c[0], d[0], t)


def teacher_extract(frame: np.ndarray, source, t: int | None = None) -> TeacherTargets:
    """Targets for one frame from a :class:`SyntheticTeacher` or an open :class:`FeatureCache`.

    A cache ignores the pixels and looks the frame up by index ``t`` (0-based record).
    """
    if isinstance(source, FeatureCache):
        if t is None:
            raise DataError("a frame index is required when reading from a feature cache")
        return source[t]
    return source(frame, t)


# ---------------------------------------------------------------------------
# feature cache


class FeatureCache:
    """Fixed-record little-endian file of per-frame teacher targets.

    Layout: ``FRAMEfeat`` magic, u16 version, u8 bytes-per-real, u32 Dc, u32 Dd,
    u32 N, u32 frame count, then one record per frame holding ``Dc`` class
    reals followed by ``N * Dd`` patch reals.
    """

    def __init__(self, path, clip_dim: int, dino_dim: int, num_patches: int, count: int,
                 dtype: np.dtype, mode: str, fh):
        self.path = Path(path)
        self.clip_dim = clip_dim
        self.dino_dim = dino_dim
        self.num_patches = num_patches
        self._count = count
        self.dtype = np.dtype(dtype).newbyteorder("<")
        self.mode = mode
        self._fh = fh

    @property
    def record_reals(self) -> int:
        return self.clip_dim + self.num_patches * self.dino_dim

    @property
    def record_bytes(self) -> int:
        return self.record_reals * self.dtype.itemsize

    @classmethod
    def create(cls, path, clip_dim: int, dino_dim: int, num_patches: int, dtype=np.float32) -> "FeatureCache":
        dtype = np.dtype(dtype)
        if dtype.itemsize not in (4, 8) or dtype.kind != "f":
            raise DataError(f"unsupported cache dtype {dtype}")
        fh = open(path, "wb")
        cache = cls(path, clip_dim, dino_dim, num_patches, 0, dtype, "w", fh)
        cache._write_header()
        return cache

    @classmethod
    def open(cls, path) -> "FeatureCache":
        fh = open(path, "rb")
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            fh.close()
            raise DataError(f"{path}: truncated header")
        magic, version, width, dc, dd, n, count = _HEADER.unpack(raw)
        if magic != CACHE_MAGIC:
            fh.close()
            raise DataError(f"{path}: bad magic {magic!r}")
        if version != CACHE_VERSION:
            fh.close()
            raise DataError(f"{path}: unsupported version {version}")
        if width not in (4, 8):
            fh.close()
            raise DataError(f"{path}: unsupported real width {width}")
        dtype = np.dtype("<f4" if width == 4 else "<f8")
        cache = cls(path, dc, dd, n, count, dtype, "r", fh)
        expected = _HEADER.size + count * cache.record_bytes
        size = os.fstat(fh.fileno()).st_size
        if size != expected:
            fh.close()
            raise DataError(f"{path}: size {size} does not match header ({expected} bytes expected)")
        return cache

    def _write_header(self) -> None:
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, self.dtype.itemsize, self.clip_dim,
                                    self.dino_dim, self.num_patches, self._count))

    def append(self, targets: TeacherTargets) -> None:
        if self.mode != "w":
            raise DataError("cache opened read-only")
        c = np.asarray(targets.c_cls).reshape(-1)
        d = np.asarray(targets.d_patch)
        if c.size != self.clip_dim or d.shape != (self.num_patches, self.dino_dim):
            raise DataError(
                f"targets ({c.size}, {d.shape}) do not match cache ({self.clip_dim}, "
                f"({self.num_patches}, {self.dino_dim}))"
            )
        self._fh.seek(_HEADER.size + self._count * self.record_bytes)
        self._fh.write(np.concatenate([c, d.reshape(-1)]).astype(self.dtype).tobytes())
        self._count += 1

    def __len__(self) -> int:
        return self._count

    def __getitem__(self, t: int) -> TeacherTargets:
        if not 0 <= t < self._count:
            raise DataError(f"frame index {t} out of range for cache of {self._count} frames")
        raw = os.pread(self._fh.fileno(), self.record_bytes, _HEADER.size + t * self.record_bytes)
        rec = np.frombuffer(raw, dtype=self.dtype)
        c = rec[: self.clip_dim].reshape(1, self.clip_dim).copy()
        d = rec[self.clip_dim:].reshape(self.num_patches, self.dino_dim).copy()
        return TeacherTargets(c, d, t)

    def read_all(self) -> tuple[np.ndarray, np.ndarray]:
        items = [self[i] for i in range(len(self))]
        return np.stack([x.c_cls for x in items]), np.stack([x.d_patch for x in items])

    def close(self) -> None:
        if self._fh is None:
            return
        if self.mode == "w":
            self._write_header()
        self._fh.close()
        self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_cache(path, c_cls: np.ndarray, d_patch: np.ndarray, dtype=np.float32) -> None:
    """Write stacked targets ``(T, 1, Dc)`` / ``(T, N, Dd)`` to a new cache file."""
    c_cls = np.asarray(c_cls)
    d_patch = np.asarray(d_patch)
    with FeatureCache.create(path, c_cls.shape[-1], d_patch.shape[-1], d_patch.shape[-2], dtype) as cache:
        for i in range(len(c_cls)):
            cache.append(TeacherTargets(c_cls[i].reshape(1, -1), d_patch[i], i))


MANIFEST = "manifest.txt"


def import_feature_dir(src, dst, num_patches: int | None = None, dtype=np.float32) -> int:
    """Build a cache from a directory of raw per-frame files.

    ``manifest.txt`` holds an optional ``dims Dc Dd N dtype`` line and then one
    ``index c-file d-file`` line per frame; files hold raw little-endian reals.
    Returns the number of frames written.
    """
    src = Path(src)
    lines = (src / MANIFEST).read_text().splitlines()
    dims = None
    rows = []
    for line in lines:
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "dims":
            dims = (int(parts[1]), int(parts[2]), int(parts[3]))
            dtype = np.dtype(parts[4]) if len(parts) > 4 else dtype
            continue
        if len(parts) != 3:
            raise DataError(f"bad manifest line: {line!r}")
        rows.append((int(parts[0]), parts[1], parts[2]))
    rows.sort(key=lambda r: r[0])
    if [r[0] for r in rows] != list(range(len(rows))):
        raise DataError("manifest frame indices must be 0..T-1 without gaps")
    dtype = np.dtype(dtype).newbyteorder("<")
    if dims is None:
        if num_patches is None:
            raise DataError("manifest lacks a dims line; pass num_patches")
        first_c = np.fromfile(src / rows[0][1], dtype=dtype)
        first_d = np.fromfile(src / rows[0][2], dtype=dtype)
        dims = (first_c.size, first_d.size // num_patches, num_patches)
    dc, dd, n = dims
    with FeatureCache.create(dst, dc, dd, n, dtype) as cache:
        for idx, cfile, dfile in rows:
            c = np.fromfile(src / cfile, dtype=dtype)
            d = np.fromfile(src / dfile, dtype=dtype)
            if c.size != dc or d.size != n * dd:
                raise DataError(f"frame {idx}: file sizes do not match dims {dims}")
            cache.append(TeacherTargets(c.reshape(1, dc), d.reshape(n, dd), idx))
    return len(rows)


def export_feature_dir(src, dst) -> int:
    """Inverse of :func:`import_feature_dir`."""
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    cache = FeatureCache.open(src)
    try:
        lines = [f"dims {cache.clip_dim} {cache.dino_dim} {cache.num_patches} {cache.dtype.str}"]
        for i in range(len(cache)):
            tg = cache[i]
            cname, dname = f"c_{i:05d}.bin", f"d_{i:05d}.bin"
            tg.c_cls.astype(cache.dtype).tofile(dst / cname)
            tg.d_patch.astype(cache.dtype).tofile(dst / dname)
            lines.append(f"{i} {cname} {dname}")
        (dst / MANIFEST).write_text("\n".join(lines) + "\n")
        return len(cache)
    finally:
        cache.close()


# ---------------------------------------------------------------------------
# training windows


@dataclass(frozen=True)
class Window:
    """Frame indices of one training sample (1-based, as timestamps)."""

    past: tuple[int, ...]
    current: int
    targets: tuple[int, int, int]  # current, spatial future, semantic future


def build_window(video, t: int, m: int = 5, deltas: dict | None = None) -> Window | None:
    """Indices for the sample centred on frame ``t`` of a 1-indexed video.

    ``video`` is a sequence of frames or its length. Returns ``None`` when the
    far-future target falls past the end of the video.
    """
    deltas = {"spatial": 2, "semantic": 4} if deltas is None else deltas
    length = video if isinstance(video, (int, np.integer)) else len(video)
    if t < 1:
        raise ValueError("t is 1-based")
    furthest = t + max(deltas["spatial"], deltas["semantic"])
    if furthest > length:
        return None
    past = tuple(range(max(1, t - m), t))
    return Window(past, t, (t, t + deltas["spatial"], t + deltas["semantic"]))

