import json

import numpy as np
import pytest

from semmap.dataset_io import (
    load_atlas,
    load_dataset,
    load_depth,
    load_rgb,
    load_semantic,
    load_trajectory,
    save_atlas,
    save_dataset,
    save_depth,
    save_rgb,
    save_semantic,
    save_trajectory,
    scene_bounds_from_frames,
)
from semmap.keyframe_atlas import SubspaceAtlas, default_field_factory
from semmap.metrics import Trajectory
from semmap.renderer import CameraIntrinsics, Pose
from semmap.scene_oracle import make_dataset, make_room_scene
from semmap.semantics import build_palette, labels_to_colors
from semmap.trainer import ingest_frames


@pytest.fixture(scope="module")
def room_ds():
    scene = make_room_scene()
    intr = CameraIntrinsics.simple(16, 16, 70)
    return make_dataset(scene, intr, None, "orbit", n_frames=5, n_eval=2, seed=0)


# ---------------------------------------------------------------------------
# rasters


def test_rgb_roundtrip_quantized(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (12, 10, 3))
    p = tmp_path / "a.png"
    save_rgb(img, p)
    back = load_rgb(p)
    assert np.array_equal(back, np.round(img * 255) / 255.0)
    with pytest.raises(ValueError, match="image"):
        save_rgb(np.zeros((4, 4)), p)


def test_depth_roundtrip_16bit(tmp_path):
    d = np.array([[0.0, 1.23456, 2.5], [0.0002, 13.1, 5.0]])
    p = tmp_path / "d.png"
    save_depth(d, p)
    back = load_depth(p)
    assert np.array_equal(back, np.round(d * 5000) / 5000.0)
    assert back[0, 0] == 0.0  # invalid stays invalid
    assert np.abs(back - d).max() <= 0.5 / 5000
    with pytest.raises(ValueError, match="16-bit"):
        save_depth(np.array([[20.0]]), p)  # 100000 > 65535
    with pytest.raises(ValueError, match="16-bit"):
        save_depth(np.array([[-0.1]]), p)
    with pytest.raises(ValueError, match="depth"):
        save_depth(np.zeros((2, 2, 2)), p)


def test_depth_custom_scale(tmp_path):
    p = tmp_path / "d.png"
    save_depth(np.array([[30.0]]), p, depth_scale=1000.0)
    assert load_depth(p, depth_scale=1000.0)[0, 0] == 30.0


def test_semantic_palette_enforcement(tmp_path):
    pal = build_palette(3)
    sem = labels_to_colors(np.array([[0, 1], [2, -1]]), pal)
    p = tmp_path / "s.png"
    save_semantic(sem, p, pal)
    assert np.array_equal(load_semantic(p), sem)  # palette colors are 8-bit exact
    with pytest.raises(ValueError, match="non-palette"):
        save_semantic(np.full((2, 2, 3), 0.123), p, pal)


# ---------------------------------------------------------------------------
# trajectory text format


def test_trajectory_file_roundtrip(tmp_path):
    tr = Trajectory(
        [0.0, 0.5, 1.0],
        np.random.default_rng(1).uniform(-2, 2, (3, 3)),
        np.tile([0.0, 0.0, 0.0, 1.0], (3, 1)),
    )
    p = tmp_path / "traj.txt"
    save_trajectory(tr, p, header="unit test")
    back = load_trajectory(p)
    assert np.allclose(back.timestamps, tr.timestamps)
    assert np.allclose(back.positions, tr.positions, atol=1e-9)
    assert np.allclose(back.quaternions, tr.quaternions, atol=1e-9)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("#") and "unit test" in lines[1]
    assert len(lines[2].split()) == 8


def test_trajectory_file_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1.0 0 0 0\n")
    with pytest.raises(ValueError, match="8 fields"):
        load_trajectory(p)
    p.write_text("# only comments\n")
    with pytest.raises(ValueError, match="no trajectory"):
        load_trajectory(p)


# ---------------------------------------------------------------------------
# dataset directory


def test_dataset_roundtrip(tmp_path, room_ds):
    man = save_dataset(room_ds, tmp_path / "ds")
    assert man.name == "manifest.json"
    back = load_dataset(tmp_path / "ds")
    assert back.scene_name == "room"
    assert back.intrinsics == room_ds.intrinsics
    assert len(back.frames) == 5 and len(back.eval_frames) == 2
    assert len(back.palette) == len(room_ds.palette)
    for a, b in zip(back.frames, room_ds.frames):
        assert a.timestamp == b.timestamp
        assert np.allclose(a.pose.t, b.pose.t)
        assert np.abs(a.rgb - b.rgb).max() <= 0.5 / 255
        assert np.abs(a.depth - b.depth).max() <= 0.5 / room_ds.depth_scale
        assert np.array_equal(a.semantic, b.semantic)
        assert np.array_equal(a.labels, b.labels)  # decode restores exact ids
    # ground-truth trajectory file parses and matches frame poses
    gt = load_trajectory(tmp_path / "ds" / "groundtruth.txt")
    assert len(gt) == 5
    assert np.allclose(gt.positions, np.stack([f.pose.t for f in room_ds.frames]),
                       atol=1e-9)


def test_dataset_rejects_unknown_version(tmp_path, room_ds):
    save_dataset(room_ds, tmp_path / "ds")
    mp = tmp_path / "ds" / "manifest.json"
    man = json.loads(mp.read_text())
    man["version"] = 2
    mp.write_text(json.dumps(man))
    with pytest.raises(ValueError, match="version"):
        load_dataset(tmp_path / "ds")


def test_scene_bounds_cover_content(room_ds):
    lo, hi = scene_bounds_from_frames(room_ds, stride=1, margin=0.15)
    for f in room_ds.frames:
        assert np.all(f.pose.t > lo) and np.all(f.pose.t < hi)
    # room geometry spans x in [-2, 2]: visible walls must be inside bounds
    assert lo[0] < -1.5 and hi[0] > 1.5
    tight_lo, tight_hi = scene_bounds_from_frames(room_ds, stride=1, margin=0.0)
    assert np.all(lo == tight_lo - 0.15) and np.all(hi == tight_hi + 0.15)


# ---------------------------------------------------------------------------
# atlas persistence


def test_atlas_roundtrip_single(tmp_path, room_ds):
    lo, hi = scene_bounds_from_frames(room_ds)
    atlas = SubspaceAtlas(
        lo, hi, single=True,
        field_factory=default_field_factory(seed=0, hidden_dim=8, geom_feat_dim=4),
    )
    ingest_frames(atlas, room_ds.frames, room_ds.intrinsics)
    atlas.subspaces[0].field.hash_tables[0][:] = 0.25  # make state recognizable
    save_atlas(atlas, tmp_path / "atlas")
    back = load_atlas(tmp_path / "atlas")
    assert back.single and back.lattice_shape == (1, 1, 1)
    assert sorted(back.keyframes) == sorted(atlas.keyframes)
    assert np.array_equal(back.subspaces[0].field.hash_tables[0],
                          atlas.subspaces[0].field.hash_tables[0])
    assert back.subspaces[0].field.dtype == atlas.subspaces[0].field.dtype
    assert np.allclose(back.keyframes[0].pose.t, atlas.keyframes[0].pose.t)


def test_atlas_roundtrip_skips_empty_subspaces(tmp_path):
    atlas = SubspaceAtlas(
        [0.2, 0.2, 0.2], [9.4, 4.4, 4.4],
        field_factory=default_field_factory(seed=0, hidden_dim=8, geom_feat_dim=4),
    )
    rgb, d = np.zeros((4, 4, 3)), np.zeros((4, 4))
    atlas.maybe_insert_keyframe(0, 0.0, Pose.look_at([2, 2, 2], [0, 2, 2]), rgb, d)
    atlas.subspaces[0].field.sdf_mlp[0][:] = 7.0
    save_atlas(atlas, tmp_path / "atlas2")
    ckpts = sorted(p.name for p in (tmp_path / "atlas2").glob("*.ckpt"))
    assert ckpts == ["field_ss000.ckpt"]  # cube 1 never saw a keyframe
    back = load_atlas(tmp_path / "atlas2")
    assert np.all(back.subspaces[0].field.sdf_mlp[0] == 7.0)
    assert back.subspaces[1].field is not None  # fresh field, still usable
