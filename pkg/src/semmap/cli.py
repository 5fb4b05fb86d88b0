"""Command-line pipeline: synthesize data, train maps, render, mesh, evaluate.

Every command writes a run.json capturing its resolved arguments; `rerun`
replays one for reproducible outputs (timing columns aside, results are
deterministic in the recorded seeds).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset_io as dio
from .field import load_checkpoint, save_checkpoint
from .keyframe_atlas import KeyframePolicy, SubspaceAtlas, default_field_factory
from .mesher import color_mesh, marching_cubes, merge_submeshes, sample_sdf_grid, save_ply
from .metrics import Trajectory, ate_rmse
from .renderer import CameraIntrinsics, Pose, RenderConfig
from .scene_oracle import (
    jitter_semantics,
    make_apartment_scene,
    make_dataset,
    make_room_scene,
    perturb_trajectory,
    sparsify_depth,
)
from .semantics import build_palette, colors_to_labels
from .trainer import TrainConfig, evaluate_views, run_training

SCENES = {"room": make_room_scene, "apartment": make_apartment_scene}


def _write_run(out_dir, command, args_ns):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = {k: v for k, v in vars(args_ns).items() if k not in ("func", "cmd")}
    with open(out / "run.json", "w") as f:
        json.dump({"command": command, "args": rec}, f, indent=2, sort_keys=True)


def _render_cfg(args) -> RenderConfig:
    return RenderConfig(
        n_samples=args.samples,
        near=args.near,
        stratified=not getattr(args, "midpoint_samples", False),
        seed=args.seed,
    )


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    scene = SCENES[args.scene]()
    palette = build_palette(scene.num_classes())
    intr = CameraIntrinsics.simple(args.width, args.height, args.fov)
    traj = args.trajectory or ("two_room_walk" if args.scene == "apartment" else "orbit")
    ds = make_dataset(
        scene, intr, palette,
        trajectory_kind=traj, n_frames=args.frames, n_eval=args.eval_frames,
        seed=args.seed,
    )
    clean_poses = [f.pose for f in ds.frames]
    if args.depth_sparsity > 0:
        for i, fr in enumerate(ds.frames):
            fr.depth = sparsify_depth(fr.depth, args.depth_sparsity, seed=args.seed + i)
    if args.label_flip > 0:
        for i, fr in enumerate(ds.frames):
            fr.semantic = jitter_semantics(fr.semantic, args.label_flip, palette, seed=args.seed + i)
            fr.labels, _ = colors_to_labels(fr.semantic, palette)
    if args.pose_noise > 0:
        noisy = perturb_trajectory(clean_poses, args.pose_noise, args.rot_noise, seed=args.seed)
        for fr, p in zip(ds.frames, noisy):
            fr.pose = p
    dio.save_dataset(ds, args.out)
    if args.pose_noise > 0:
        # manifest poses are the corrupted inputs; keep the clean ground truth
        dio.save_trajectory(
            Trajectory.from_poses(clean_poses, ds.timestamps()),
            Path(args.out) / "groundtruth.txt",
            header="uncorrupted trajectory",
        )
    _write_run(args.out, "synth", args)
    print(f"wrote {len(ds.frames)} frames + {len(ds.eval_frames)} eval frames to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _policy(args) -> KeyframePolicy:
    return KeyframePolicy(args.kf_translation, args.kf_rotation, args.kf_interval)


def cmd_train(args) -> int:
    ds = dio.load_dataset(args.dataset)
    lo, hi = dio.scene_bounds_from_frames(ds)
    factory = default_field_factory(seed=args.seed)
    atlas = SubspaceAtlas(
        lo, hi, edge=args.edge, field_factory=factory, single=not args.subspaces
    )
    tcfg = TrainConfig(
        mode=args.mode,
        pixels_per_iter=args.pixels,
        lr_base=args.lr,
        warmup_iters=args.warmup,
        seed=args.seed,
    )
    rcfg = _render_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, _ = run_training(
        ds, atlas, tcfg, rcfg, args.iters, _policy(args),
        log_path=out / "train_log.csv",
        progress_every=args.progress_every,
    )
    dio.save_atlas(atlas, out)
    if atlas.single:
        save_checkpoint(atlas.subspaces[0].field, out / "field.ckpt")
    _write_run(out, "train", args)
    n_kf = len(atlas.keyframes)
    print(
        f"trained {args.iters} iters on {n_kf} keyframes "
        f"({len(ds.frames)} frames, {len(ds.frames) / max(n_kf, 1):.1f}x reduction); "
        f"final loss {rows[-1]['total']:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# shared field loading


def _load_field(args):
    """(field_like, s, center, atlas_or_none) from --checkpoint or --atlas."""
    if getattr(args, "atlas", None):
        atlas = dio.load_atlas(args.atlas)
        if atlas.single:
            f = atlas.subspaces[0].field
            return f, f.s, atlas.subspaces[0].center, atlas
        return atlas.make_eval(), atlas.mean_s(), None, atlas
    if not getattr(args, "checkpoint", None):
        raise SystemExit("need --checkpoint or --atlas")
    params = load_checkpoint(args.checkpoint)
    return params, params.s, None, None


def cmd_render(args) -> int:
    field_like, s, center, _ = _load_field(args)
    if args.dataset:
        intr = dio.load_dataset(args.dataset).intrinsics
    else:
        intr = CameraIntrinsics.simple(args.width, args.height, args.fov)
    if args.trajectory:
        traj = dio.load_trajectory(args.trajectory)
        poses = traj.poses()
        stamps = traj.timestamps
    else:
        v = [float(x) for x in args.pose.split()]
        if len(v) != 7:
            raise SystemExit("--pose needs 'tx ty tz qx qy qz qw'")
        poses = [Pose(np.array(v[3:7]), np.array(v[0:3]))]
        stamps = [0.0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .renderer import render_image

    rcfg = _render_cfg(args)
    for i, pose in enumerate(poses):
        if center is not None:
            pose = pose.translated(-np.asarray(center))
        img = render_image(pose, intr, field_like, rcfg, s=s)
        dio.save_rgb(img["rgb"], out / f"render_{i:06d}_rgb.png")
        dio.save_depth(np.clip(img["depth"], 0, 13.0), out / f"render_{i:06d}_depth.png")
        dio.save_rgb(np.clip(img["semantic"], 0, 1), out / f"render_{i:06d}_semantic.png")
    _write_run(out, "render", args)
    print(f"rendered {len(poses)} views to {out}")
    return 0


# ---------------------------------------------------------------------------
# mesh


def cmd_mesh(args) -> int:
    field_like, _, _, atlas = _load_field(args)
    pieces = []
    if atlas is not None and not atlas.single:
        from .field import forward_batch, sdf_only

        if not atlas.subspaces_with_keyframes():
            raise SystemExit("atlas has no populated subspaces to mesh")
        for ss in atlas.subspaces_with_keyframes():
            g = ss.field.grid
            grid = sample_sdf_grid(
                lambda p, f=ss.field: sdf_only(p, f), g.domain_min, g.domain_max,
                args.resolution,
            )
            mesh = marching_cubes(grid)
            if args.color and not mesh.is_empty:
                mesh = color_mesh(mesh, lambda p, f=ss.field: forward_batch(p, f)[0].rgb)
            pieces.append((mesh, ss.center))
        mesh = merge_submeshes(pieces)
        voxel = float(np.max((g.domain_max - g.domain_min) / (args.resolution - 1)))
    else:
        from .field import forward_batch, sdf_only

        params = field_like if hasattr(field_like, "grid") else atlas.subspaces[0].field
        g = params.grid
        grid = sample_sdf_grid(
            lambda p: sdf_only(p, params), g.domain_min, g.domain_max, args.resolution
        )
        mesh = marching_cubes(grid)
        if args.color and not mesh.is_empty:
            mesh = color_mesh(mesh, lambda p: forward_batch(p, params)[0].rgb)
        if atlas is not None:  # single-map atlas: shift into world coordinates
            mesh = merge_submeshes([(mesh, atlas.subspaces[0].center)])
        voxel = float(np.max((g.domain_max - g.domain_min) / (args.resolution - 1)))
    save_ply(mesh, args.out)
    Path(args.out).with_suffix(".json").write_text(
        json.dumps({"vertices": len(mesh.vertices), "triangles": len(mesh.triangles), "voxel_size": voxel})
    )
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    ds = dio.load_dataset(args.dataset)
    field_like, s, center, _ = _load_field(args)
    frames = ds.eval_frames if (ds.eval_frames and not args.train_split) else ds.frames
    if args.max_views:
        frames = frames[: args.max_views]
    rcfg = _render_cfg(args)
    res = evaluate_views(
        field_like, frames, ds.intrinsics, rcfg,
        palette=ds.palette, s=s, center=center,
        fit_depth_scale=args.fit_depth_scale,
    )
    metrics = dict(res["aggregate"])
    if args.est_trajectory:
        est = dio.load_trajectory(args.est_trajectory)
        gt = dio.load_trajectory(Path(args.dataset) / "groundtruth.txt")
        metrics["ate"] = ate_rmse(est, gt, with_scale=args.ate_scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w") as f:
        json.dump({"aggregate": metrics, "views": res["views"]}, f, indent=2)
    _write_run(out, "eval", args)
    print(json.dumps(metrics, indent=2))
    return 0


# ---------------------------------------------------------------------------
# ablate


def _train_eval_once(ds, mode, iters, seed, samples, pixels, fit_scale=False):
    lo, hi = dio.scene_bounds_from_frames(ds)
    atlas = SubspaceAtlas(lo, hi, field_factory=default_field_factory(seed=seed), single=True)
    tcfg = TrainConfig(mode=mode, pixels_per_iter=pixels, seed=seed, warmup_iters=200)
    rcfg = RenderConfig(n_samples=samples, seed=seed)
    run_training(ds, atlas, tcfg, rcfg, iters)
    f = atlas.subspaces[0].field
    frames = ds.eval_frames or ds.frames[:5]
    return evaluate_views(
        f, frames, ds.intrinsics, rcfg, palette=ds.palette,
        center=atlas.subspaces[0].center, fit_depth_scale=fit_scale,
    )["aggregate"]


def cmd_ablate(args) -> int:
    ds = dio.load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.study == "sparsity":
        for pct in [float(x) for x in args.levels.split(",")]:
            d2 = dio.load_dataset(args.dataset)
            for i, fr in enumerate(d2.frames):
                fr.depth = sparsify_depth(fr.depth, pct, seed=args.seed + i)
            agg = _train_eval_once(d2, "rgbd+semantic", args.iters, args.seed, args.samples, args.pixels)
            rows.append({"level": pct, **agg})
    elif args.study == "robustness":
        for rate in [float(x) for x in args.levels.split(",")]:
            d2 = dio.load_dataset(args.dataset)
            for i, fr in enumerate(d2.frames):
                fr.semantic = jitter_semantics(fr.semantic, rate, d2.palette, seed=args.seed + i)
            agg = _train_eval_once(d2, "rgbd+semantic", args.iters, args.seed, args.samples, args.pixels)
            rows.append({"level": rate, **agg})
    elif args.study == "rgb-mode":
        for mode in ("rgb", "rgb+semantic"):
            agg = _train_eval_once(ds, mode, args.iters, args.seed, args.samples, args.pixels, fit_scale=True)
            rows.append({"level": mode, **agg})
    elif args.study == "keyframes":
        for tag, policy in (
            ("keyframes", KeyframePolicy()),
            ("all_frames", KeyframePolicy(0.0, 0.0, 1)),
        ):
            lo, hi = dio.scene_bounds_from_frames(ds)
            atlas = SubspaceAtlas(lo, hi, field_factory=default_field_factory(seed=args.seed), single=True)
            tcfg = TrainConfig(pixels_per_iter=args.pixels, seed=args.seed, warmup_iters=200)
            rcfg = RenderConfig(n_samples=args.samples, seed=args.seed)
            run_training(ds, atlas, tcfg, rcfg, args.iters, policy)
            agg = evaluate_views(
                atlas.subspaces[0].field, ds.eval_frames or ds.frames[:5],
                ds.intrinsics, rcfg, palette=ds.palette,
                center=atlas.subspaces[0].center,
            )["aggregate"]
            rows.append({"level": tag, "n_keyframes": len(atlas.keyframes), **agg})
    import csv

    keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "level", k))
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    _write_run(out, "ablate", args)
    for r in rows:
        print(r)
    return 0


def cmd_rerun(args) -> int:
    with open(args.run) as f:
        rec = json.load(f)
    ns = argparse.Namespace(**rec["args"])
    return COMMANDS[rec["command"]](ns)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "rerun": cmd_rerun,
}


def _add_render_args(p, samples=128):
    p.add_argument("--samples", type=int, default=samples, help="samples per ray")
    p.add_argument("--near", type=float, default=0.05)
    p.add_argument("--midpoint-samples", action="store_true", help="disable stratified jitter")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semmap", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="render a synthetic RGB-D-semantic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", choices=sorted(SCENES), default="room")
    p.add_argument("--trajectory", choices=["orbit", "lissajous", "two_room_walk"])
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--eval-frames", type=int, default=10)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov", type=float, default=70.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth-sparsity", type=float, default=0.0, help="percent of depth pixels zeroed")
    p.add_argument("--label-flip", type=float, default=0.0, help="semantic label flip probability")
    p.add_argument("--pose-noise", type=float, default=0.0, help="translation sigma (m)")
    p.add_argument("--rot-noise", type=float, default=0.0, help="rotation sigma (deg)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a map from a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--mode", default="rgbd+semantic")
    p.add_argument("--pixels", type=int, default=1024)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--warmup", type=int, default=2000)
    p.add_argument("--subspaces", action="store_true", help="cube-partitioned atlas instead of one map")
    p.add_argument("--edge", type=float, default=5.0)
    p.add_argument("--kf-translation", type=float, default=0.1)
    p.add_argument("--kf-rotation", type=float, default=10.0)
    p.add_argument("--kf-interval", type=int, default=30)
    p.add_argument("--progress-every", type=int, default=0)
    _add_render_args(p, samples=64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render views from a trained field")
    p.add_argument("--checkpoint")
    p.add_argument("--atlas")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="take intrinsics from this dataset")
    p.add_argument("--trajectory", help="trajectory file of poses to render")
    p.add_argument("--pose", help="'tx ty tz qx qy qz qw'")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov", type=float, default=70.0)
    _add_render_args(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("mesh", help="extract a triangle mesh")
    p.add_argument("--checkpoint")
    p.add_argument("--atlas")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--color", action="store_true")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="score a trained map against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--atlas")
    p.add_argument("--out", required=True)
    p.add_argument("--train-split", action="store_true", help="score training frames instead of eval frames")
    p.add_argument("--max-views", type=int, default=0)
    p.add_argument("--fit-depth-scale", action="store_true")
    p.add_argument("--est-trajectory")
    p.add_argument("--ate-scale", action="store_true", help="similarity (not rigid) alignment")
    _add_render_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="small controlled comparison studies")
    p.add_argument("--study", required=True, choices=["sparsity", "keyframes", "robustness", "rgb-mode"])
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", default="0,10,30,50,70")
    p.add_argument("--iters", type=int, default=1200)
    p.add_argument("--pixels", type=int, default=256)
    p.add_argument("--samples", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("rerun", help="replay a recorded run.json")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_rerun)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
