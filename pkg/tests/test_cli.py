import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from semmap.cli import main
from semmap.dataset_io import load_dataset, load_trajectory
from semmap.mesher import load_ply


def run(*argv):
    return main([str(a) for a in argv])


def synth_tiny(out, **extra):
    argv = [
        "synth", "--out", out, "--scene", "room", "--frames", "6",
        "--eval-frames", "2", "--width", "12", "--height", "12", "--seed", "0",
    ]
    for k, v in extra.items():
        argv += [f"--{k.replace('_', '-')}", str(v)]
    return run(*argv)


def train_tiny(ds_dir, out, **extra):
    argv = [
        "train", "--dataset", ds_dir, "--out", out, "--iters", "40",
        "--pixels", "48", "--samples", "10", "--warmup", "20", "--seed", "0",
    ]
    for k, v in extra.items():
        argv += [f"--{k.replace('_', '-')}", str(v)]
    return run(*argv)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert synth_tiny(root / "ds") == 0
    assert train_tiny(root / "ds", root / "map") == 0
    return root


# ---------------------------------------------------------------------------
# synth


def test_synth_outputs(workspace):
    ds_dir = workspace / "ds"
    assert (ds_dir / "manifest.json").is_file()
    assert (ds_dir / "run.json").is_file()
    ds = load_dataset(ds_dir)
    assert len(ds.frames) == 6 and len(ds.eval_frames) == 2
    assert ds.intrinsics.width == 12
    rec = json.loads((ds_dir / "run.json").read_text())
    assert rec["command"] == "synth" and rec["args"]["frames"] == 6


def test_synth_corruptions(tmp_path):
    synth_tiny(tmp_path / "c", depth_sparsity=50, label_flip=0.3, pose_noise=0.01)
    ds = load_dataset(tmp_path / "c")
    zero_frac = np.mean([np.mean(f.depth == 0) for f in ds.frames])
    assert 0.45 < zero_frac < 0.6
    # groundtruth.txt keeps the uncorrupted poses while frames carry noise
    gt = load_trajectory(tmp_path / "c" / "groundtruth.txt")
    frame_t = np.stack([f.pose.t for f in ds.frames])
    assert not np.allclose(gt.positions, frame_t, atol=1e-6)
    assert np.abs(gt.positions - frame_t).max() < 0.1


def test_rerun_reproduces_synth_byte_for_byte(tmp_path):
    out = tmp_path / "ds"
    synth_tiny(out)
    rec = (out / "run.json").read_text()

    def digest():
        return {
            p.relative_to(out).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*"))
            if p.is_file()
        }

    before = digest()
    for p in sorted(out.rglob("*"), reverse=True):
        p.unlink() if p.is_file() else p.rmdir()
    (out / "run.json").write_text(rec)
    assert run("rerun", "--run", out / "run.json") == 0
    assert digest() == before


# ---------------------------------------------------------------------------
# train


def test_train_outputs(workspace):
    m = workspace / "map"
    for name in ("atlas.json", "field.ckpt", "train_log.csv", "run.json"):
        assert (m / name).is_file(), name
    log = (m / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("iteration,")
    assert len(log) >= 2


def test_train_rerun_identical_checkpoint(workspace, tmp_path):
    out = tmp_path / "map2"
    train_tiny(workspace / "ds", out)
    a = (workspace / "map" / "field.ckpt").read_bytes()
    b = (out / "field.ckpt").read_bytes()
    assert a == b  # same dataset + seeds: bitwise identical training


# ---------------------------------------------------------------------------
# render / mesh / eval


def test_render_from_checkpoint(workspace, tmp_path):
    ds = load_dataset(workspace / "ds")
    t = ds.frames[0].pose.t - np.asarray(
        json.loads((workspace / "map" / "atlas.json").read_text())
        ["subspaces"][0]["center"]
    )
    q = ds.frames[0].pose.quat
    pose = " ".join(f"{x:.6f}" for x in (*t, *q))
    out = tmp_path / "renders"
    assert run(
        "render", "--checkpoint", workspace / "map" / "field.ckpt",
        "--out", out, "--pose", pose, "--width", "12", "--height", "12",
        "--samples", "10",
    ) == 0
    for suffix in ("rgb", "depth", "semantic"):
        assert (out / f"render_000000_{suffix}.png").is_file()


def test_render_trajectory_from_atlas(workspace, tmp_path):
    out = tmp_path / "renders"
    assert run(
        "render", "--atlas", workspace / "map", "--out", out,
        "--trajectory", workspace / "ds" / "groundtruth.txt",
        "--dataset", workspace / "ds", "--samples", "8",
    ) == 0
    assert len(list(out.glob("render_*_rgb.png"))) == 6


def test_mesh_command(workspace, tmp_path):
    out = tmp_path / "m.ply"
    assert run(
        "mesh", "--atlas", workspace / "map", "--out", out, "--resolution", "24",
    ) == 0
    mesh = load_ply(out)
    side = json.loads(out.with_suffix(".json").read_text())
    assert side["vertices"] == len(mesh.vertices)
    assert side["voxel_size"] > 0


def test_eval_command(workspace, tmp_path):
    out = tmp_path / "ev"
    assert run(
        "eval", "--dataset", workspace / "ds", "--atlas", workspace / "map",
        "--out", out, "--samples", "10",
    ) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    agg = metrics["aggregate"]
    assert {"psnr", "ssim", "l1_depth_cm", "miou"} <= set(agg)
    assert len(metrics["views"]) == 2  # eval split by default


def test_eval_with_ate(workspace, tmp_path):
    out = tmp_path / "ev2"
    assert run(
        "eval", "--dataset", workspace / "ds", "--atlas", workspace / "map",
        "--out", out, "--samples", "8", "--max-views", "1",
        "--est-trajectory", workspace / "ds" / "groundtruth.txt",
    ) == 0
    agg = json.loads((out / "metrics.json").read_text())["aggregate"]
    assert agg["ate"]["rmse_m"] < 1e-12
    assert agg["ate"]["n_pairs"] == 6


# ---------------------------------------------------------------------------
# ablate


def test_ablate_keyframes_study(workspace, tmp_path):
    out = tmp_path / "ab"
    assert run(
        "ablate", "--study", "keyframes", "--dataset", workspace / "ds",
        "--out", out, "--iters", "6", "--pixels", "24", "--samples", "8",
    ) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("level,")
    assert {r.split(",")[0] for r in rows[1:]} == {"keyframes", "all_frames"}


# ---------------------------------------------------------------------------
# argument errors


def test_cli_argument_errors(workspace, tmp_path):
    with pytest.raises(SystemExit):
        run("train")  # missing required args
    with pytest.raises(SystemExit, match="checkpoint or"):
        run("mesh", "--out", tmp_path / "x.ply")
    with pytest.raises(SystemExit, match="pose"):
        run("render", "--checkpoint", workspace / "map" / "field.ckpt",
            "--out", tmp_path / "r", "--pose", "1 2 3")
