"""``frame-ssl`` command-line entry point.

Usage::

    frame-ssl <command> [--config FILE] [--out DIR] [--key=value ...]

Every :class:`~frame_ssl.config.RunConfig` field is a ``--key=value`` flag
(a bare ``--flag`` sets a boolean to true). Exit status is 0 on success, 1 for
usage errors, 2 for missing or malformed data and 3 for a non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigKeyError, RunConfig, resolve
from .estimators import FrameDistiller, FrameMemoryModel, LinearProbe, NumericError, ZeroShotClassifier
from .evaluation import (
    PropagationConfig,
    box_size,
    feature_drift_profile,
    jaccard_and_boundary,
    miou,
    pck,
    propagate_labels,
    track_regions,
    write_bar_svg,
    write_drift_csv,
    write_metrics_csv,
)
from .evaluation.metrics import jaccard
from .evaluation.propagation import keypoints_from_soft, keypoints_to_grid
from .synthetic import Clip, SpecError, export_clip, generate_clip, load_clip, random_scene, write_pgm
from .teacher import DataError, FeatureCache, SyntheticTeacher, export_feature_dir, import_feature_dir, write_cache

log = logging.getLogger("frame_ssl")

COMMANDS = (
    "train-stage1",
    "train-stage2",
    "eval-prop",
    "eval-seg",
    "eval-zeroshot",
    "eval-regions",
    "drift-profile",
    "gen-data",
    "dump-features",
    "import-features",
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EVAL_SEED_OFFSET = 10_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# argument handling


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--key=value``, ``--key value`` or bare ``--flag`` (boolean true)."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, val = body.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            key, val = body, extra[i + 1]
            i += 1
        else:
            key, val = body, "true"
        out[key.replace("-", "_")] = val
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="frame-ssl", description="Two-stage frame encoder: training, evaluation and data tools.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--out", default="out", help="output directory")
    return p


def effective_threads(cfg: RunConfig) -> int:
    if cfg.threads < 1:
        raise UsageError("threads must be >= 1")
    if cfg.deterministic and cfg.threads > 1:
        warnings.warn("--deterministic overrides --threads; running single-threaded", stacklevel=2)
        return 1
    return cfg.threads


# ---------------------------------------------------------------------------
# data


def _clip_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} not found")
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.txt").exists())
    if not dirs:
        raise DataError(f"no clip folders with a manifest.txt under {root}")
    return dirs


def _scene(cfg: RunConfig, seed: int):
    return random_scene(seed, cfg.image_size, cfg.n_objects, cfg.frames, cfg.max_speed, cfg.patch_size,
                        n_labels=cfg.n_labels, occluder=cfg.occluder)


def _base_seed(cfg: RunConfig) -> int:
    return cfg.seed * 100_000


def load_split(cfg: RunConfig, count: int | None = None) -> tuple[list[Clip], list[Clip]]:
    """Training and evaluation clips, from ``cfg.data`` or generated from the seed.

    In a data directory, folders named ``eval_*`` form the evaluation split;
    without any, the last ``heldout_clips`` folders do.
    """
    if cfg.data:
        dirs = _clip_dirs(Path(cfg.data))
        evals = [d for d in dirs if d.name.startswith("eval_")]
        if evals:
            trains = [d for d in dirs if not d.name.startswith("eval_")]
        else:
            if cfg.heldout_clips >= len(dirs):
                raise DataError(f"{len(dirs)} clips cannot hold out {cfg.heldout_clips} for evaluation")
            cut = len(dirs) - cfg.heldout_clips
            trains, evals = dirs[:cut], dirs[cut:]
        if count is not None:
            trains = trains[:count]
        return [load_clip(d) for d in trains], [load_clip(d) for d in evals]
    base = _base_seed(cfg)
    n = cfg.clips if count is None else count
    train = [generate_clip(_scene(cfg, base + i)) for i in range(n)]
    held = [generate_clip(_scene(cfg, base + EVAL_SEED_OFFSET + j)) for j in range(cfg.heldout_clips)]
    return train, held


def make_teacher(cfg: RunConfig) -> SyntheticTeacher:
    return SyntheticTeacher(cfg.image_size, cfg.patch_size, depth=cfg.teacher_depth, clip_dim=cfg.clip_dim,
                            dino_dim=cfg.dino_dim, seed=cfg.teacher_seed, init_std=cfg.teacher_init_std)


def teacher_targets(cfg: RunConfig, clips: list[Clip]):
    """Per-video ``(c (T, 1, Dc), d (T, N, Dd))`` from the cache (frames in clip order) or the synthetic teacher."""
    if not cfg.teacher_cache:
        teacher = make_teacher(cfg)
        return [teacher.extract_batch(c.frames) for c in clips]
    with FeatureCache.open(cfg.teacher_cache) as cache:
        need = sum(len(c) for c in clips)
        if len(cache) < need:
            raise DataError(f"teacher cache holds {len(cache)} frames, clips need {need}")
        c_all, d_all = cache.read_all()
    out, pos = [], 0
    for clip in clips:
        n = len(clip)
        out.append((c_all[pos : pos + n], d_all[pos : pos + n]))
        pos += n
    return out


# ---------------------------------------------------------------------------
# model loading and features


def distiller_from_config(cfg: RunConfig) -> FrameDistiller:
    return FrameDistiller(
        image_size=cfg.image_size, patch_size=cfg.patch_size, embed_dim=cfg.embed_dim, depth=cfg.depth,
        heads=cfg.heads, mlp_ratio=cfg.mlp_ratio, clip_dim=cfg.clip_dim, dino_dim=cfg.dino_dim,
        spatial_head_depth=cfg.spatial_head_depth, lambda_cls=cfg.lambda_cls, lambda_patch=cfg.lambda_patch,
        use_mean_scaling=cfg.stage1_mean_scaling, lr=cfg.stage1_lr, weight_decay=cfg.weight_decay,
        warmup_steps=cfg.warmup_steps, restart_period=cfg.restart_period, min_lr=cfg.min_lr,
        steps=cfg.stage1_steps, batch_size=cfg.batch_size, seed=cfg.seed, log_every=cfg.log_every,
    )


def memory_model_from_config(cfg: RunConfig, encoder: FrameDistiller) -> FrameMemoryModel:
    return FrameMemoryModel(
        encoder=encoder, memory_frames=cfg.memory_frames, memory_dim=cfg.memory_dim,
        memory_radius=cfg.memory_radius_value, heads=cfg.heads, spatial_head_depth=cfg.spatial_head_depth,
        alpha_cls_now=cfg.alpha_cls_now, alpha_cls_future=cfg.alpha_cls_future,
        alpha_patch_now=cfg.alpha_patch_now, alpha_patch_future=cfg.alpha_patch_future,
        spatial_delta=cfg.spatial_delta, semantic_delta=cfg.semantic_delta,
        use_mean_scaling=cfg.stage2_mean_scaling, lr=cfg.stage2_lr, weight_decay=cfg.weight_decay,
        warmup_steps=cfg.warmup_steps, restart_period=cfg.stage2_restart_period, min_lr=cfg.min_lr,
        steps=cfg.stage2_steps, batch_size=cfg.batch_size, seed=cfg.seed, log_every=cfg.log_every,
    )


def load_model(path: str):
    """``FrameDistiller`` or ``FrameMemoryModel`` depending on the checkpoint's stage."""
    if not path:
        raise FileNotFoundError("this command needs --checkpoint=PATH")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    config, _ = load_checkpoint(path)
    if config.get("stage") == 2:
        return FrameMemoryModel.load(path)
    return FrameDistiller.load(path)


class StubEncoder:
    """Identical features in every frame: a one-hot code of the patch position.

    Each patch then matches only itself, so propagation copies the first-frame
    labels unchanged through the video.
    """

    def __init__(self, patch_size: int):
        self.patch_size = patch_size

    def patch_features(self, frames: np.ndarray) -> np.ndarray:
        T_, H, W = frames.shape[:3]
        n = (H // self.patch_size) * (W // self.patch_size)
        return np.broadcast_to(np.eye(n), (T_, n, n)).copy()


def feature_source(cfg: RunConfig):
    """Callable mapping a clip's frames to per-frame patch features ``(T, N, D)``."""
    mode = cfg.features
    if mode == "stub":
        stub = StubEncoder(cfg.patch_size)
        return stub.patch_features, None
    model = load_model(cfg.checkpoint)
    if mode not in ("auto", "stage1", "stage2"):
        raise UsageError(f"unknown features mode {mode!r}")
    if isinstance(model, FrameMemoryModel):
        if mode == "stage1":
            return (lambda frames: model.encoder.transform(frames)), model
        return model.transform, model
    if mode == "stage2":
        raise UsageError("features=stage2 needs a stage-2 checkpoint")
    return model.transform, model


def _map(cfg: RunConfig, fn, items):
    threads = effective_threads(cfg)
    if threads == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    train, held = load_split(cfg)
    root = out / "clips"
    for i, clip in enumerate(train):
        export_clip(clip, root / f"train_{i:04d}")
    for j, clip in enumerate(held):
        export_clip(clip, root / f"eval_{j:04d}")
    log.info("wrote %d training and %d evaluation clips to %s", len(train), len(held), root)
    return EXIT_OK


def _write_history(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_train_stage1(cfg: RunConfig, out: Path) -> int:
    train, _ = load_split(cfg)
    targets = teacher_targets(cfg, train)
    model = distiller_from_config(cfg).fit([c.frames for c in train], targets)
    model.save(out / "stage1.ckpt")
    _write_history(model.history_, out / "train_log.csv")
    log.info("stage 1: loss %.5f -> %.5f", model.history_[0]["loss"], model.history_[-1]["loss"])
    return EXIT_OK


def cmd_train_stage2(cfg: RunConfig, out: Path) -> int:
    encoder = load_model(cfg.checkpoint)
    if isinstance(encoder, FrameMemoryModel):
        encoder = encoder.encoder
    count = None if cfg.data else cfg.stage2_clips
    train, _ = load_split(cfg, count)
    targets = teacher_targets(cfg, train)
    model = memory_model_from_config(cfg, encoder).fit([c.frames for c in train], targets)
    model.save(out / "stage2.ckpt")
    _write_history(model.history_, out / "train_log.csv")
    log.info("stage 2: loss %.5f -> %.5f", model.history_[0]["loss"], model.history_[-1]["loss"])
    return EXIT_OK


def _prop_config(cfg: RunConfig) -> PropagationConfig:
    return PropagationConfig(cfg.k, cfg.temperature, cfg.context_frames, cfg.radius)


def evaluate_propagation(features: np.ndarray, clip: Clip, pcfg: PropagationConfig) -> tuple[dict, np.ndarray]:
    """J/F/J&F over all frames plus keypoint PCK for one clip; returns the row and the hard label grids."""
    grids = clip.gt.grids()
    k = clip.gt.num_objects
    result = propagate_labels(features, grids[0], pcfg, num_labels=k + 1)
    scores = jaccard_and_boundary(result.hard, grids)
    row = {"J_m": scores.J_m, "F_m": scores.F_m, "JF_m": scores.JF_m}
    kp0 = clip.gt.keypoints[0]
    kp_grid = keypoints_to_grid(kp0, grids.shape[1:], clip.gt.patch_size)
    kp_soft = propagate_labels(features, kp_grid, pcfg, num_labels=k + 1).soft
    preds, gts, sizes = [], [], []
    for t in range(1, len(grids)):
        preds.append(keypoints_from_soft(kp_soft[t], k, grids.shape[1:], clip.gt.patch_size))
        gts.append(clip.gt.keypoints[t])
        sizes.append(box_size(clip.gt.boxes[t]))
    if preds:
        valid0 = ~np.isnan(kp0).any(-1)
        gt_kp = np.where(valid0[None, :, None], np.stack(gts), np.nan)
        for thr, val in pck(np.stack(preds), gt_kp, np.stack(sizes)).items():
            row[f"PCK@{thr:g}"] = val
    return row, result.hard


def _finish_metrics(cfg: RunConfig, out: Path, rows: list[dict], title: str, columns: list[str]) -> list[dict]:
    written = write_metrics_csv(rows, out / "metrics.csv")
    if cfg.svg and written:
        mean = written[-1]
        write_bar_svg({c: float(mean[c]) for c in columns if c in mean}, out / "metrics.svg", title)
    return written


def cmd_eval_prop(cfg: RunConfig, out: Path) -> int:
    extract, _ = feature_source(cfg)
    _, clips = load_split(cfg)
    pcfg = _prop_config(cfg)

    def one(item):
        i, clip = item
        return evaluate_propagation(extract(clip.frames), clip, pcfg)

    results = _map(cfg, one, list(enumerate(clips)))
    rows = []
    for i, (row, hard) in enumerate(results):
        rows.append({"video": f"clip_{i:04d}", **row})
        if cfg.export_labels:
            d = out / "labels" / f"clip_{i:04d}"
            d.mkdir(parents=True, exist_ok=True)
            for t, grid in enumerate(hard):
                write_pgm(d / f"frame_{t:04d}.pgm", grid)
    written = _finish_metrics(cfg, out, rows, "label propagation", ["J_m", "F_m", "JF_m", "PCK@0.1", "PCK@0.2"])
    log.info("J&F_m %.4f over %d clips", written[-1]["JF_m"], len(rows))
    return EXIT_OK


def _probe_pairs(feats: list[np.ndarray], labels: list[np.ndarray], delta: int):
    xs, ys = [], []
    for f, g in zip(feats, labels):
        n = len(f) - delta
        if n <= 0:
            continue
        xs.append(f[:n].reshape(-1, f.shape[-1]))
        ys.append(g[delta:].reshape(-1))
    return np.concatenate(xs), np.concatenate(ys)


def cmd_eval_seg(cfg: RunConfig, out: Path) -> int:
    extract, _ = feature_source(cfg)
    train, held = load_split(cfg)
    train_f = _map(cfg, lambda c: extract(c.frames), train)
    held_f = _map(cfg, lambda c: extract(c.frames), held)
    train_l = [c.gt.semantic_grids() for c in train]
    held_l = [c.gt.semantic_grids() for c in held]
    rows = [{"video": f"clip_{i:04d}"} for i in range(len(held))]
    for name, delta in (("mIoU", 0), ("mIoU_future", cfg.spatial_delta)):
        X, y = _probe_pairs(train_f, train_l, delta)
        probe = LinearProbe(epochs=cfg.probe_epochs, lr=cfg.probe_lr, seed=cfg.seed).fit(X, y)
        for i, (f, g) in enumerate(zip(held_f, held_l)):
            n = len(f) - delta
            pred = probe.predict(f[:n]).reshape(g[delta:].shape)
            rows[i][name] = miou(pred, g[delta:])
    _finish_metrics(cfg, out, rows, "linear probe", ["mIoU", "mIoU_future"])
    return EXIT_OK


def semantic_vectors(model, frames: np.ndarray) -> np.ndarray:
    if isinstance(model, FrameMemoryModel):
        return model.predict_semantic(frames)
    return model.predict_targets(frames)[0]


def cmd_eval_zeroshot(cfg: RunConfig, out: Path) -> int:
    model = load_model(cfg.checkpoint)
    train, held = load_split(cfg)
    targets = teacher_targets(cfg, train)
    labels = np.array([c.label for c in train])
    classes = np.unique(labels)
    emb = np.stack([np.concatenate([targets[i][0] for i in np.nonzero(labels == k)[0]]).reshape(-1, cfg.clip_dim)
                    .mean(0) for k in classes])
    clf = ZeroShotClassifier().fit(emb, classes)
    seqs = _map(cfg, lambda c: semantic_vectors(model, c.frames), held)
    preds = clf.predict(seqs)
    rows = [{"video": f"clip_{i:04d}", "label": str(c.label), "predicted": str(p), "accuracy": float(p == c.label)}
            for i, (c, p) in enumerate(zip(held, preds))]
    _finish_metrics(cfg, out, rows, "zero-shot", ["accuracy"])
    return EXIT_OK


def region_scores(features: np.ndarray, clip: Clip, reference: str, rng: np.random.Generator) -> dict:
    """Track frame-0 objects through shuffled per-frame object proposals; mean IoU with the true object."""
    grids = clip.gt.grids()
    ids = [k for k in range(1, clip.gt.num_objects + 1) if (grids[0] == k).any()]
    if not ids:
        return {"region_iou": float("nan"), "gaps": 0}
    flat = grids.reshape(len(grids), -1)
    masks0 = [flat[0] == k for k in ids]
    proposals, owners = [None], [None]
    for t in range(1, len(grids)):
        present = [k for k in range(1, clip.gt.num_objects + 1) if (flat[t] == k).any()]
        order = list(rng.permutation(len(present)))
        proposals.append([flat[t] == present[j] for j in order])
        owners.append([present[j] for j in order])
    result = track_regions(features, masks0, proposals, reference)
    ious = []
    for t in range(1, len(grids)):
        for r, k in enumerate(ids):
            a = result.assignments[t, r]
            truth = flat[t] == k
            pred = proposals[t][a] if a >= 0 else np.zeros_like(truth)
            ious.append(jaccard(pred, truth))
    return {"region_iou": float(np.mean(ious)) if ious else float("nan"), "gaps": len(result.gaps)}


def cmd_eval_regions(cfg: RunConfig, out: Path) -> int:
    extract, _ = feature_source(cfg)
    _, held = load_split(cfg)
    if cfg.region_reference not in ("first", "previous"):
        raise UsageError("region_reference must be 'first' or 'previous'")
    seeds = np.random.SeedSequence([cfg.seed, 303]).spawn(len(held))

    def one(item):
        clip, ss = item
        return region_scores(extract(clip.frames), clip, cfg.region_reference, np.random.default_rng(ss))

    results = _map(cfg, one, list(zip(held, seeds)))
    rows = [{"video": f"clip_{i:04d}", **r} for i, r in enumerate(results)]
    _finish_metrics(cfg, out, rows, "region tracking", ["region_iou"])
    return EXIT_OK


def cmd_drift_profile(cfg: RunConfig, out: Path) -> int:
    train, _ = load_split(cfg)
    targets = teacher_targets(cfg, train)
    profiles = [np.array(feature_drift_profile(c, cfg.drift_max_delta, d)) for c, d in targets]
    mean = np.mean(profiles, axis=0)
    rows = [(int(r[0]), float(r[1]), float(r[2])) for r in mean]
    write_drift_csv(rows, out / "drift.csv")
    if cfg.svg:
        write_bar_svg({f"cls k={k}": cd for k, cd, _ in rows} | {f"patch k={k}": pd for k, _, pd in rows},
                      out / "drift.svg", "feature drift")
    return EXIT_OK


def cmd_dump_features(cfg: RunConfig, out: Path) -> int:
    if cfg.cache:
        if not Path(cfg.cache).exists():
            raise FileNotFoundError(f"feature cache {cfg.cache} not found")
        n = export_feature_dir(cfg.cache, out / "features")
        log.info("exported %d frames to %s", n, out / "features")
        return EXIT_OK
    train, _ = load_split(cfg)
    frames = np.concatenate([c.frames for c in train])
    if cfg.dump_source == "teacher":
        c, d = make_teacher(cfg).extract_batch(frames)
    elif cfg.dump_source == "model":
        model = load_model(cfg.checkpoint)
        if isinstance(model, FrameMemoryModel):
            model = model.encoder
        c, d = model.predict_targets(frames)
    else:
        raise UsageError("dump_source must be 'teacher' or 'model'")
    write_cache(out / "features.frc", c, d)
    return EXIT_OK


def cmd_import_features(cfg: RunConfig, out: Path) -> int:
    if not cfg.source:
        raise UsageError("import-features needs --source=DIR")
    if not (Path(cfg.source) / "manifest.txt").exists():
        raise FileNotFoundError(f"{cfg.source}/manifest.txt not found")
    n = import_feature_dir(cfg.source, out / "features.frc", num_patches=(cfg.image_size // cfg.patch_size) ** 2)
    log.info("imported %d frames into %s", n, out / "features.frc")
    return EXIT_OK


HANDLERS = {
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "eval-prop": cmd_eval_prop,
    "eval-seg": cmd_eval_seg,
    "eval-zeroshot": cmd_eval_zeroshot,
    "eval-regions": cmd_eval_regions,
    "drift-profile": cmd_drift_profile,
    "gen-data": cmd_gen_data,
    "dump-features": cmd_dump_features,
    "import-features": cmd_import_features,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args, extra = build_parser().parse_known_args(argv)
        cfg = resolve(args.config, parse_overrides(extra))
        effective_threads(cfg)
    except (UsageError, ConfigKeyError, ValueError) as exc:
        print(f"frame-ssl: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"frame-ssl: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    try:
        return HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        print(f"frame-ssl: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"frame-ssl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, DataError, CheckpointError, SpecError, ValueError) as exc:
        print(f"frame-ssl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
