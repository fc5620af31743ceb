"""Teacher targets, the feature cache, checkpoints and synthetic clips."""

import struct

import numpy as np
import pytest

from frame_ssl.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from frame_ssl.synthetic import (
    ObjectSpec,
    SceneSpec,
    SpecError,
    export_clip,
    generate_clip,
    label_grid,
    load_clip,
    random_scene,
    read_pgm,
    write_pgm,
)
from frame_ssl.teacher import (
    DataError,
    FeatureCache,
    SyntheticTeacher,
    TeacherTargets,
    build_window,
    export_feature_dir,
    import_feature_dir,
    teacher_extract,
    write_cache,
)


@pytest.fixture(scope="module")
def small_teacher():
    return SyntheticTeacher(16, 8, embed_dim=16, depth=1, heads=2, clip_dim=6, dino_dim=5, seed=3)


# ---------------------------------------------------------------------------
# teacher


def test_teacher_is_frozen_and_deterministic(small_teacher, rng):
    frame = rng.random((16, 16, 3))
    a = small_teacher(frame)
    b = small_teacher(frame.copy())
    assert a.c_cls.tobytes() == b.c_cls.tobytes() and a.d_patch.tobytes() == b.d_patch.tobytes()
    assert not any(p.requires_grad for p in small_teacher.parameters())
    assert a.c_cls.shape == (1, 6) and a.d_patch.shape == (4, 5)


def test_teacher_distinguishes_frames(small_teacher, rng):
    for _ in range(100):
        a = small_teacher(rng.random((16, 16, 3)))
        b = small_teacher(rng.random((16, 16, 3)))
        assert np.linalg.norm(a.d_patch - b.d_patch) > 0


def test_zero_class_vector_rejected():
    with pytest.raises(DataError):
        TeacherTargets(np.zeros((1, 3)), np.ones((2, 2)))


def test_teacher_extract_sources(small_teacher, rng, tmp_path):
    frames = rng.random((3, 16, 16, 3))
    c, d = small_teacher.extract_batch(frames)
    write_cache(tmp_path / "t.frc", c, d, dtype=np.float64)
    with FeatureCache.open(tmp_path / "t.frc") as cache:
        got = teacher_extract(frames[2], cache, 2)
        np.testing.assert_array_equal(got.d_patch, d[2])
        with pytest.raises(DataError):
            teacher_extract(frames[0], cache)
    np.testing.assert_array_equal(teacher_extract(frames[1], small_teacher, 1).d_patch, d[1])


# ---------------------------------------------------------------------------
# feature cache


def test_cache_roundtrip_bit_exact(rng, tmp_path):
    for dtype in (np.float32, np.float64):
        c = rng.standard_normal((5, 1, 4)).astype(dtype)
        d = rng.standard_normal((5, 6, 3)).astype(dtype)
        path = tmp_path / f"c{np.dtype(dtype).itemsize}.frc"
        write_cache(path, c, d, dtype=dtype)
        with FeatureCache.open(path) as cache:
            assert len(cache) == 5
            c2, d2 = cache.read_all()
        assert c2.tobytes() == c.tobytes() and d2.tobytes() == d.tobytes()


def test_cache_header_is_little_endian(rng, tmp_path):
    write_cache(tmp_path / "a.frc", rng.standard_normal((2, 1, 3)), rng.standard_normal((2, 4, 5)))
    raw = (tmp_path / "a.frc").read_bytes()
    magic, version, width, dc, dd, n, count = struct.unpack_from("<9sHBIIII", raw)
    assert (magic, version, width, dc, dd, n, count) == (b"FRAMEfeat", 1, 4, 3, 5, 4, 2)


def test_cache_rejects_corruption(rng, tmp_path):
    path = tmp_path / "a.frc"
    write_cache(path, rng.standard_normal((2, 1, 3)), rng.standard_normal((2, 4, 5)))
    raw = bytearray(path.read_bytes())
    (tmp_path / "trunc.frc").write_bytes(bytes(raw[:-3]))
    with pytest.raises(DataError):
        FeatureCache.open(tmp_path / "trunc.frc")
    bad = bytearray(raw)
    bad[0:1] = b"X"
    (tmp_path / "magic.frc").write_bytes(bytes(bad))
    with pytest.raises(DataError):
        FeatureCache.open(tmp_path / "magic.frc")
    with FeatureCache.open(path) as cache:
        with pytest.raises(DataError):
            cache[2]


def test_cache_append_checks_dims(tmp_path):
    with FeatureCache.create(tmp_path / "a.frc", 3, 5, 4) as cache:
        with pytest.raises(DataError):
            cache.append(TeacherTargets(np.ones((1, 2)), np.ones((4, 5))))


def test_feature_dir_roundtrip(rng, tmp_path):
    c, d = rng.standard_normal((3, 1, 4)), rng.standard_normal((3, 6, 2))
    write_cache(tmp_path / "a.frc", c, d)
    assert export_feature_dir(tmp_path / "a.frc", tmp_path / "dir") == 3
    assert import_feature_dir(tmp_path / "dir", tmp_path / "b.frc") == 3
    assert (tmp_path / "a.frc").read_bytes() == (tmp_path / "b.frc").read_bytes()


def test_feature_dir_size_mismatch(rng, tmp_path):
    write_cache(tmp_path / "a.frc", rng.standard_normal((2, 1, 4)), rng.standard_normal((2, 6, 2)))
    export_feature_dir(tmp_path / "a.frc", tmp_path / "dir")
    (tmp_path / "dir" / "d_00001.bin").write_bytes(b"\0" * 8)
    with pytest.raises(DataError):
        import_feature_dir(tmp_path / "dir", tmp_path / "b.frc")


# ---------------------------------------------------------------------------
# training windows


def test_window_examples():
    w = build_window(10, 6)
    assert w.past == (1, 2, 3, 4, 5) and w.targets == (6, 8, 10)
    w = build_window(10, 1)
    assert w.past == () and w.targets == (1, 3, 5)
    assert build_window(10, 7) is None
    assert build_window(list(range(20)), 12, m=3).past == (9, 10, 11)
    with pytest.raises(ValueError):
        build_window(10, 0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(rng, tmp_path):
    tensors = {"enc.a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5).astype(np.float32),
               "scalar": np.array(2.5)}
    save_checkpoint(tmp_path / "m.ckpt", tensors, {"stage": 1, "k": [1, 2]})
    config, loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert config == {"stage": 1, "k": [1, 2]}
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        assert loaded[name].tobytes() == tensors[name].tobytes()


def test_checkpoint_errors(rng, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"a": rng.standard_normal(4)})
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
    (tmp_path / "m2.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m2.ckpt")
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "i.ckpt", {"a": np.arange(3)})


# ---------------------------------------------------------------------------
# synthetic clips


def test_static_disc_clip():
    spec = SceneSpec(objects=(ObjectSpec("disc", (200, 30, 30), (12.0, 12.0), (20.0, 30.0)),), frames=4)
    clip = generate_clip(spec)
    for t in range(1, 4):
        assert clip.frames[t].tobytes() == clip.frames[0].tobytes()
        assert np.array_equal(clip.gt.masks[t], clip.gt.masks[0])


def test_motion_shifts_mask():
    spec = SceneSpec(objects=(ObjectSpec("rect", (200, 30, 30), (10.0, 8.0), (20.0, 20.0), (0.0, 1.0)),), frames=5)
    clip = generate_clip(spec)
    for t in range(1, 5):
        np.testing.assert_array_equal(clip.gt.masks[t], np.roll(clip.gt.masks[t - 1], 1, axis=1))


def test_generation_reproducible():
    a = generate_clip(random_scene(7))
    b = generate_clip(random_scene(7))
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.gt.masks.tobytes() == b.gt.masks.tobytes()


def test_keypoints_are_mask_centroids():
    clip = generate_clip(random_scene(3, n_objects=3))
    for t in range(len(clip)):
        for j in range(3):
            ys, xs = np.nonzero(clip.gt.masks[t] == j + 1)
            if ys.size:
                assert abs(clip.gt.keypoints[t, j, 0] - ys.mean()) <= 0.5
                assert abs(clip.gt.keypoints[t, j, 1] - xs.mean()) <= 0.5


def test_static_scene_option():
    clip = generate_clip(random_scene(2, max_speed=0, frames=3))
    assert clip.frames[0].tobytes() == clip.frames[2].tobytes()
    with pytest.raises(SpecError):
        random_scene(2, max_speed=-1)


def test_bad_specs():
    with pytest.raises(SpecError):
        generate_clip(SceneSpec(objects=(ObjectSpec("star", (1, 1, 1), (4.0, 4.0), (5.0, 5.0)),)))
    with pytest.raises(SpecError):
        generate_clip(SceneSpec(height=16, width=16, objects=(ObjectSpec("rect", (1, 1, 1), (20.0, 4.0), (5.0, 5.0)),)))
    with pytest.raises(SpecError):
        generate_clip(SceneSpec(frames=0))


def test_label_grid_majority():
    mask = np.zeros((4, 4), dtype=int)
    mask[:2, :2] = 1
    mask[0, 2:] = 2  # half of the top-right block: a tie with background
    np.testing.assert_array_equal(label_grid(mask, 2), [[1, 0], [0, 0]])


def test_semantic_grids_use_classes():
    clip = generate_clip(random_scene(5, n_objects=2))
    sem = clip.gt.semantic_grids()
    grids = clip.gt.grids()
    for j in range(2):
        assert np.all(sem[grids == j + 1] == clip.gt.classes[j] + 1)
    assert np.all(sem[grids == 0] == 0)


def test_clip_directory_roundtrip(tmp_path):
    clip = generate_clip(random_scene(11, n_objects=2, occluder=True))
    export_clip(clip, tmp_path / "c")
    back = load_clip(tmp_path / "c")
    assert back.frames.tobytes() == clip.frames.tobytes()
    assert back.gt.masks.tobytes() == clip.gt.masks.tobytes()
    np.testing.assert_array_equal(back.gt.keypoints, clip.gt.keypoints)
    np.testing.assert_array_equal(back.gt.boxes, clip.gt.boxes)
    np.testing.assert_array_equal(back.gt.classes, clip.gt.classes)
    assert back.label == clip.label


def test_pgm_roundtrip(rng, tmp_path):
    grid = rng.integers(0, 7, size=(5, 9))
    write_pgm(tmp_path / "g.pgm", grid)
    np.testing.assert_array_equal(read_pgm(tmp_path / "g.pgm"), grid)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_clip(tmp_path)
