"""On-disk dataset format: PNG rasters plus a JSON manifest.

rgb and semantic images are 8-bit RGB; depth is 16-bit grayscale storing
meters * depth_scale (default 5000, so 2 m -> 10000). Trajectories use the
plain-text `timestamp tx ty tz qx qy qz qw` format with '#' comments.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .field import load_checkpoint, save_checkpoint
from .keyframe_atlas import SubspaceAtlas
from .metrics import Trajectory
from .renderer import CameraIntrinsics, Pose, camera_rays
from .scene_oracle import OracleFrame, SyntheticDataset
from .semantics import Palette

DEFAULT_DEPTH_SCALE = 5000.0


def save_rgb(img: np.ndarray, path):
    """8-bit RGB PNG from a float [0,1] (H,W,3) array."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {a.shape}")
    b = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(b, mode="RGB").save(path)


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_depth(depth_m: np.ndarray, path, depth_scale: float = DEFAULT_DEPTH_SCALE):
    """16-bit grayscale PNG of depth in meters; 0 stays 0 (invalid)."""
    d = np.asarray(depth_m, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"expected (H, W) depth, got {d.shape}")
    q = np.round(d * depth_scale)
    if np.any(q < 0) or np.any(q > 65535):
        raise ValueError("depth out of range for 16-bit storage at this scale")
    Image.fromarray(q.astype(np.uint16)).save(path)


def load_depth(path, depth_scale: float = DEFAULT_DEPTH_SCALE) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.uint16)
    return raw.astype(np.float64) / depth_scale


def save_semantic(sem: np.ndarray, path, palette: Palette):
    """Semantic color image as exact 8-bit palette bytes; black = unknown."""
    a = np.asarray(sem)
    b = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    valid = {tuple(np.round(np.array(e.color) * 255).astype(int)) for e in palette.entries}
    valid.add((0, 0, 0))
    got = {tuple(c) for c in b.reshape(-1, 3)}
    if not got <= valid:
        raise ValueError("semantic image contains non-palette colors")
    Image.fromarray(b, mode="RGB").save(path)


load_semantic = load_rgb


# ---------------------------------------------------------------------------
# trajectory text files


def save_trajectory(traj: Trajectory, path, header: str = ""):
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        if header:
            f.write(f"# {header}\n")
        for ts, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
            vals = " ".join(f"{x:.9f}" for x in (*p, *q))
            f.write(f"{ts:.6f} {vals}\n")


def load_trajectory(path) -> Trajectory:
    ts, pos, quat = [], [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if len(tok) != 8:
                raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(tok)}")
            vals = [float(x) for x in tok]
            ts.append(vals[0])
            pos.append(vals[1:4])
            quat.append(vals[4:8])
    if not ts:
        raise ValueError(f"{path}: no trajectory rows")
    return Trajectory(np.array(ts), np.array(pos), np.array(quat))


# ---------------------------------------------------------------------------
# dataset directory


def _intr_to_json(intr: CameraIntrinsics) -> dict:
    return {
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
    }


def _intr_from_json(obj: dict) -> CameraIntrinsics:
    return CameraIntrinsics(**obj)


def save_dataset(ds: SyntheticDataset, out_dir) -> Path:
    """Write frames, palette, manifest, and ground-truth trajectory files."""
    out = Path(out_dir)
    for sub in ("rgb", "depth", "semantic"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    ds.palette.save(out / "palette.json")

    def frame_entry(fr: OracleFrame, tag: str, i: int) -> dict:
        stem = f"{tag}{i:06d}"
        save_rgb(fr.rgb, out / "rgb" / f"{stem}.png")
        save_depth(fr.depth, out / "depth" / f"{stem}.png", ds.depth_scale)
        save_semantic(fr.semantic, out / "semantic" / f"{stem}.png", ds.palette)
        return {
            "timestamp": fr.timestamp,
            "rgb": f"rgb/{stem}.png",
            "depth": f"depth/{stem}.png",
            "semantic": f"semantic/{stem}.png",
            "quat": fr.pose.quat.tolist(),
            "t": fr.pose.t.tolist(),
        }

    manifest = {
        "version": 1,
        "scene": ds.scene_name,
        "depth_scale": ds.depth_scale,
        "intrinsics": _intr_to_json(ds.intrinsics),
        "palette": "palette.json",
        "frames": [frame_entry(f, "frame_", i) for i, f in enumerate(ds.frames)],
        "eval_frames": [frame_entry(f, "eval_", i) for i, f in enumerate(ds.eval_frames)],
        "trajectory_gt": "groundtruth.txt",
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    save_trajectory(
        Trajectory.from_poses(ds.trajectory(), ds.timestamps()),
        out / "groundtruth.txt",
        header=f"scene {ds.scene_name}",
    )
    return out / "manifest.json"


def load_dataset(path) -> SyntheticDataset:
    """Read a dataset directory (path to it or to its manifest.json)."""
    p = Path(path)
    manifest_path = p / "manifest.json" if p.is_dir() else p
    root = manifest_path.parent
    with open(manifest_path) as f:
        man = json.load(f)
    if man.get("version") != 1:
        raise ValueError(f"unsupported manifest version {man.get('version')}")
    palette = Palette.load(root / man["palette"])
    scale = float(man["depth_scale"])

    def read_frame(e: dict) -> OracleFrame:
        from .semantics import colors_to_labels

        sem = load_semantic(root / e["semantic"])
        labels, _ = colors_to_labels(sem, palette)
        return OracleFrame(
            timestamp=float(e["timestamp"]),
            pose=Pose(np.array(e["quat"]), np.array(e["t"])),
            rgb=load_rgb(root / e["rgb"]),
            depth=load_depth(root / e["depth"], scale),
            semantic=sem,
            labels=labels,
        )

    frames = [read_frame(e) for e in man["frames"]]
    ts = [f.timestamp for f in frames]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("frame timestamps must be strictly increasing")
    return SyntheticDataset(
        scene_name=man.get("scene", "scene"),
        intrinsics=_intr_from_json(man["intrinsics"]),
        palette=palette,
        frames=frames,
        eval_frames=[read_frame(e) for e in man.get("eval_frames", [])],
        depth_scale=scale,
    )


def scene_bounds_from_frames(ds: SyntheticDataset, stride: int = 10, margin: float = 0.15):
    """Tight world bounds from back-projected depths plus camera origins."""
    los, his = [], []
    intr = ds.intrinsics
    vv, uu = np.mgrid[0 : intr.height : 8, 0 : intr.width : 8]
    for fr in ds.frames[:: max(1, stride)]:
        o, d, zfac = camera_rays(intr, fr.pose, uu.ravel(), vv.ravel())
        z = fr.depth[::8, ::8].ravel()
        m = z > 0
        pts = o[m] + (z[m] / zfac[m])[:, None] * d[m]
        pts = np.vstack([pts, fr.pose.t[None]])
        los.append(pts.min(axis=0))
        his.append(pts.max(axis=0))
    if not los:
        raise ValueError("no frames with valid depth to bound the scene")
    return np.min(los, axis=0) - margin, np.max(his, axis=0) + margin


# ---------------------------------------------------------------------------
# atlas persistence: atlas.json + one field checkpoint per subspace


def save_atlas(atlas: SubspaceAtlas, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = atlas.export_state()
    state["fields"] = {}
    for ss in atlas.subspaces:
        if not (ss.keyframe_ids or atlas.single):
            continue
        name = f"field_ss{ss.index:03d}.ckpt"
        save_checkpoint(ss.field, out / name)
        state["fields"][str(ss.index)] = name
    with open(out / "atlas.json", "w") as f:
        json.dump(state, f, indent=2)
    return out / "atlas.json"


def load_atlas(path) -> SubspaceAtlas:
    p = Path(path)
    atlas_path = p / "atlas.json" if p.is_dir() else p
    with open(atlas_path) as f:
        state = json.load(f)
    atlas = SubspaceAtlas.restore(state)
    for idx, name in state.get("fields", {}).items():
        atlas.subspaces[int(idx)].field = load_checkpoint(atlas_path.parent / name)
    return atlas
