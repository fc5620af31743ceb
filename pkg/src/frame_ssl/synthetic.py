"""Deterministic toy videos: colored rectangles and discs moving at constant velocity.

Positions wrap around the canvas, so with integer velocities every frame is an
exact circular shift of the object layer from the previous one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PALETTE = np.array(
    [
        [230, 40, 40],
        [40, 200, 60],
        [50, 80, 235],
        [240, 220, 40],
        [200, 60, 220],
        [40, 220, 220],
        [250, 140, 30],
        [245, 245, 245],
    ],
    dtype=np.uint8,
)


class SpecError(ValueError):
    """Invalid scene specification."""


@dataclass(frozen=True)
class ObjectSpec:
    kind: str  # "rect" or "disc"
    color: tuple[int, int, int]
    size: tuple[float, float]  # (height, width); discs use size[0] as diameter
    position: tuple[float, float]  # centre (y, x) at t = 0
    velocity: tuple[float, float] = (0.0, 0.0)
    occluder: bool = False


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    objects: tuple[ObjectSpec, ...] = ()
    frames: int = 16
    patch_size: int = 8
    background: tuple[int, int, int] = (90, 90, 100)
    texture: float = 12.0
    label: int = 0


@dataclass
class GroundTruth:
    masks: np.ndarray  # (T, H, W) int: 0 background, k + 1 for object k
    keypoints: np.ndarray  # (T, K, 2) visible-pixel centroid (y, x); NaN when hidden
    boxes: np.ndarray  # (T, K, 4) y0, x0, y1, x1 (inclusive pixel bounds); NaN when hidden
    patch_size: int
    classes: np.ndarray | None = None  # (K,) semantic class per object (palette index), if known

    @property
    def num_objects(self) -> int:
        return self.keypoints.shape[1]

    def grids(self) -> np.ndarray:
        return np.stack([label_grid(m, self.patch_size, self.num_objects + 1) for m in self.masks])

    def semantic_grids(self) -> np.ndarray:
        """Patch grids labelled by object class: 0 background, ``classes[k] + 1`` for object ``k``."""
        if self.classes is None:
            raise ValueError("this clip carries no object classes")
        lut = np.concatenate([[0], np.asarray(self.classes, dtype=np.int64) + 1])
        return lut[self.grids()]


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W, 3) float in [0, 1]
    gt: GroundTruth
    spec: SceneSpec | None = None
    label: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)


def label_grid(mask: np.ndarray, patch_size: int, num_labels: int | None = None) -> np.ndarray:
    """Majority label per ``P x P`` patch; ties between leading labels go to background."""
    h, w = mask.shape
    p = patch_size
    if h % p or w % p:
        raise SpecError(f"mask {h}x{w} not divisible by patch size {p}")
    num_labels = int(mask.max()) + 1 if num_labels is None else num_labels
    blocks = mask.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(h // p, w // p, p * p)
    counts = np.stack([(blocks == k).sum(-1) for k in range(num_labels)], axis=-1)
    best = counts.max(-1, keepdims=True)
    winners = counts == best
    out = counts.argmax(-1)
    out[winners.sum(-1) > 1] = 0
    return out.astype(np.int64)


def _coverage(obj: ObjectSpec, t: int, height: int, width: int) -> np.ndarray:
    cy = obj.position[0] + obj.velocity[0] * t
    cx = obj.position[1] + obj.velocity[1] * t
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    dy = np.mod(ys - cy + height / 2, height) - height / 2
    dx = np.mod(xs - cx + width / 2, width) - width / 2
    dy, dx = np.meshgrid(dy, dx, indexing="ij")
    if obj.kind == "rect":
        h, w = obj.size
        return (dy >= -h / 2) & (dy < h / 2) & (dx >= -w / 2) & (dx < w / 2)
    if obj.kind == "disc":
        r = obj.size[0] / 2
        return dy * dy + dx * dx <= r * r
    raise SpecError(f"unknown shape kind {obj.kind!r}")


def _background(spec: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    base = np.asarray(spec.background, dtype=np.float64)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    phase = rng.uniform(0, 2 * np.pi, size=(3, 2))
    freq = rng.uniform(0.5, 2.0, size=(3, 2)) * 2 * np.pi
    tex = np.stack(
        [
            np.sin(freq[c, 0] * yy / spec.height + phase[c, 0]) * np.cos(freq[c, 1] * xx / spec.width + phase[c, 1])
            for c in range(3)
        ],
        axis=-1,
    )
    noise = rng.normal(0, 0.25, size=(spec.height, spec.width, 3))
    return np.clip(base + spec.texture * (tex + noise), 0, 255)


def generate_clip(spec: SceneSpec) -> Clip:
    """Render ``spec.frames`` frames and their ground truth."""
    for obj in spec.objects:
        if obj.size[0] > spec.height or obj.size[1] > spec.width:
            raise SpecError(f"object of size {obj.size} does not fit a {spec.height}x{spec.width} canvas")
        if obj.kind not in ("rect", "disc"):
            raise SpecError(f"unknown shape kind {obj.kind!r}")
    if spec.frames < 1:
        raise SpecError("a clip needs at least one frame")
    bg = np.round(_background(spec)).astype(np.uint8)
    tracked = [i for i, o in enumerate(spec.objects) if not o.occluder]
    order = tracked + [i for i, o in enumerate(spec.objects) if o.occluder]
    k = len(tracked)
    T_, H, W = spec.frames, spec.height, spec.width
    frames = np.empty((T_, H, W, 3), dtype=np.uint8)
    masks = np.zeros((T_, H, W), dtype=np.int64)
    for t in range(T_):
        img = bg.copy()
        lab = np.zeros((H, W), dtype=np.int64)
        for i in order:
            obj = spec.objects[i]
            cov = _coverage(obj, t, H, W)
            img[cov] = np.asarray(obj.color, dtype=np.uint8)
            lab[cov] = 0 if obj.occluder else tracked.index(i) + 1
        frames[t] = img
        masks[t] = lab
    keypoints = np.full((T_, k, 2), np.nan)
    boxes = np.full((T_, k, 4), np.nan)
    for t in range(T_):
        for j in range(k):
            ys, xs = np.nonzero(masks[t] == j + 1)
            if ys.size:
                keypoints[t, j] = ys.mean(), xs.mean()
                boxes[t, j] = ys.min(), xs.min(), ys.max(), xs.max()
    classes = np.array([palette_index(spec.objects[i].color) for i in tracked], dtype=np.int64)
    gt = GroundTruth(masks, keypoints, boxes, spec.patch_size, classes)
    return Clip(frames.astype(np.float64) / 255.0, gt, spec, spec.label)


def palette_index(color) -> int:
    """Position of ``color`` in :data:`PALETTE`, or -1 for off-palette colors."""
    hits = np.nonzero((PALETTE == np.asarray(color, dtype=np.uint8)).all(-1))[0]
    return int(hits[0]) if hits.size else -1


def random_scene(seed: int, size: int = 64, n_objects: int = 2, frames: int = 16, max_speed: int = 2,
                 patch_size: int = 8, label: int | None = None, n_labels: int = 4,
                 occluder: bool = False) -> SceneSpec:
    """Scene with integer nonzero velocities (static when ``max_speed`` is 0); object 0 takes palette color ``label``."""
    if max_speed < 0:
        raise SpecError("max_speed must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    if label is None:
        label = int(rng.integers(n_labels))
    colors = [int(label)] + list(rng.choice([c for c in range(len(PALETTE)) if c != label], n_objects - 1, replace=False))
    objs = []
    for i in range(n_objects):
        kind = "rect" if rng.random() < 0.5 else "disc"
        s = float(rng.integers(size // 5, size // 3 + 1))
        hw = (s, s) if kind == "disc" else (s, float(rng.integers(size // 5, size // 3 + 1)))
        pos = (float(rng.uniform(0, size)), float(rng.uniform(0, size)))
        vel = (0.0, 0.0)
        while max_speed > 0 and vel == (0.0, 0.0):
            vel = tuple(float(v) for v in rng.integers(-max_speed, max_speed + 1, size=2))
        objs.append(ObjectSpec(kind, tuple(int(c) for c in PALETTE[colors[i]]), hw, pos, vel))
    if occluder:
        objs.append(ObjectSpec("rect", (20, 20, 20), (size / 2, size / 8), (size / 2, size / 2), (0.0, 0.0), True))
    return SceneSpec(seed, size, size, tuple(objs), frames, patch_size, label=int(label))


# ---------------------------------------------------------------------------
# clip directories


def write_pgm(path, grid: np.ndarray) -> None:
    """Plain (ASCII, P2) portable graymap of a nonnegative integer grid."""
    grid = np.asarray(grid, dtype=np.int64)
    h, w = grid.shape
    maxval = max(int(grid.max()), 1)
    rows = "\n".join(" ".join(str(v) for v in row) for row in grid)
    Path(path).write_text(f"P2\n{w} {h}\n{maxval}\n{rows}\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM file")
    w, h = int(tokens[1]), int(tokens[2])
    vals = np.array([int(v) for v in tokens[4 : 4 + w * h]], dtype=np.int64)
    return vals.reshape(h, w)


def export_clip(clip: Clip, out_dir) -> Path:
    """Write raw RGB frames, PGM label masks and a text manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    T_, H, W, _ = clip.frames.shape
    k = clip.gt.num_objects
    lines = [
        "# frame clip manifest v1",
        f"size {H} {W}",
        f"frames {T_}",
        f"objects {k}",
        f"patch {clip.gt.patch_size}",
        f"label {clip.label}",
    ]
    if clip.gt.classes is not None:
        lines.append("classes " + " ".join(str(int(c)) for c in clip.gt.classes))
    pixels = np.round(clip.frames * 255).astype(np.uint8)
    for t in range(T_):
        fname, mname = f"frame_{t:04d}.rgb", f"mask_{t:04d}.pgm"
        pixels[t].tofile(out / fname)
        write_pgm(out / mname, clip.gt.masks[t])
        lines.append(f"frame {t} {fname} {mname}")
        for j in range(k):
            vals = [float(v) for v in (*clip.gt.keypoints[t, j], *clip.gt.boxes[t, j])]
            lines.append(f"object {t} {j + 1} " + " ".join(repr(v) for v in vals))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def load_clip(clip_dir) -> Clip:
    """Read a directory written by :func:`export_clip` (or prepared by hand in that layout)."""
    d = Path(clip_dir)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    meta: dict = {"label": 0, "patch": 8, "objects": 0}
    frame_rows = []
    obj_rows = []
    for line in manifest.read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        key = parts[0]
        if key == "size":
            meta["size"] = (int(parts[1]), int(parts[2]))
        elif key in ("frames", "objects", "patch", "label"):
            meta[key] = int(parts[1])
        elif key == "classes":
            meta["classes"] = np.array([int(v) for v in parts[1:]], dtype=np.int64)
        elif key == "frame":
            frame_rows.append((int(parts[1]), parts[2], parts[3] if len(parts) > 3 else None))
        elif key == "object":
            obj_rows.append((int(parts[1]), int(parts[2]), [float(v) for v in parts[3:9]]))
        else:
            raise ValueError(f"{manifest}: unknown key {key!r}")
    H, W = meta["size"]
    frame_rows.sort()
    T_ = len(frame_rows)
    k = meta["objects"]
    frames = np.stack([np.fromfile(d / f, dtype=np.uint8).reshape(H, W, 3) for _, f, _ in frame_rows])
    masks = np.zeros((T_, H, W), dtype=np.int64)
    for t, _, m in frame_rows:
        if m is not None:
            masks[t] = read_pgm(d / m)
    keypoints = np.full((T_, k, 2), np.nan)
    boxes = np.full((T_, k, 4), np.nan)
    for t, j, vals in obj_rows:
        keypoints[t, j - 1] = vals[:2]
        boxes[t, j - 1] = vals[2:6]
    gt = GroundTruth(masks, keypoints, boxes, meta["patch"], meta.get("classes"))
    return Clip(frames.astype(np.float64) / 255.0, gt, None, meta["label"], {"dir": str(d)})
