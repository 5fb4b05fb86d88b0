"""Analytic SDF scenes for synthetic data generation and ground truth.

Scenes are minimum-unions of primitives (sphere, box, inverted-box room);
sphere tracing renders exact rgb / depth / semantic frames, and corruption
helpers degrade them in controlled ways for robustness studies.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial.transform import Rotation

from .renderer import CameraIntrinsics, Pose, camera_rays
from .semantics import Palette, build_palette, colors_to_labels, labels_to_colors

TRACE_TOL = 1e-5
TRACE_MAX_STEPS = 256
MIN_CAMERA_CLEARANCE = 0.2


@dataclass
class ScenePrimitive:
    """One analytic solid. kind: 'sphere' | 'box' | 'room' (inverted box)."""

    kind: str
    class_id: int
    albedo: tuple[float, float, float]
    center: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    radius: float = 0.5
    half_extents: np.ndarray = dc_field(default_factory=lambda: np.ones(3) * 0.5)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "room"):
            raise ValueError(f"unknown primitive kind '{self.kind}'")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if self.kind == "sphere" and self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        if self.kind in ("box", "room") and np.any(self.half_extents <= 0):
            raise ValueError("box half extents must be positive")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - self.center
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.radius
        d = np.abs(q) - self.half_extents
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        box = outside + inside
        return -box if self.kind == "room" else box


@dataclass
class AnalyticScene:
    primitives: list[ScenePrimitive]
    name: str = "scene"

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")

    def bounds(self, margin: float = 0.0):
        los, his = [], []
        for pr in self.primitives:
            if pr.kind == "sphere":
                ext = np.full(3, pr.radius)
            else:
                ext = pr.half_extents
            los.append(pr.center - ext)
            his.append(pr.center + ext)
        return np.min(los, axis=0) - margin, np.max(his, axis=0) + margin

    def num_classes(self) -> int:
        return max(pr.class_id for pr in self.primitives) + 1


def scene_sdf(scene: AnalyticScene, points):
    """Min-union SDF with attributes of the nearest primitive.

    Returns (sdf (B,), class_ids (B,), albedo (B,3)).
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    all_sdf = np.stack([pr.sdf(p) for pr in scene.primitives], axis=0)
    amin = np.argmin(all_sdf, axis=0)
    sdf = all_sdf[amin, np.arange(len(p))]
    cls = np.array([pr.class_id for pr in scene.primitives])[amin]
    alb = np.array([pr.albedo for pr in scene.primitives])[amin]
    return sdf, cls, alb


def scene_sdf_only(scene: AnalyticScene, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.min(np.stack([pr.sdf(p) for pr in scene.primitives]), axis=0)


def scene_normals(scene: AnalyticScene, points, eps: float = 1e-5) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    g = np.empty_like(p)
    for a in range(3):
        dp = np.zeros(3)
        dp[a] = eps
        g[:, a] = scene_sdf_only(scene, p + dp) - scene_sdf_only(scene, p - dp)
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(n, 1e-12)


def make_scene_eval(scene: AnalyticScene, palette: Palette | None = None):
    """Renderer adapter over the analytic SDF: flat albedo, palette semantics."""

    def fn(pts):
        sdf, cls, alb = scene_sdf(scene, pts)
        sem = labels_to_colors(cls, palette) if palette is not None else None
        return sdf, alb, sem

    return fn


def trace_rays(
    scene: AnalyticScene,
    origins,
    dirs,
    t_max: float,
    t_min: float = 0.0,
    tol: float = TRACE_TOL,
    max_steps: int = TRACE_MAX_STEPS,
):
    """Sphere tracing. Returns (t (R,), hit (R,) bool); misses keep t untouched.

    Inside-starting rays (negative SDF) march on |sdf| so room interiors
    viewed from inside still resolve.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    R = len(o)
    t = np.full(R, t_min, dtype=np.float64)
    hit = np.zeros(R, dtype=bool)
    alive = np.ones(R, dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        p = o[alive] + t[alive, None] * d[alive]
        s = np.abs(scene_sdf_only(scene, p))
        just_hit = s < tol
        idx = np.flatnonzero(alive)
        hit[idx[just_hit]] = True
        t[idx[~just_hit]] += s[~just_hit]
        over = t[idx] > t_max
        alive[idx[just_hit | over]] = False
    return t, hit


@dataclass
class OracleFrame:
    timestamp: float
    pose: Pose
    rgb: np.ndarray
    depth: np.ndarray  # z-depth in meters, 0 where no surface was hit
    semantic: np.ndarray  # palette colors, black where unknown / miss
    labels: np.ndarray  # class ids, -1 on miss


def oracle_render(
    scene: AnalyticScene,
    pose: Pose,
    intr: CameraIntrinsics,
    palette: Palette,
    t_max: float | None = None,
    ambient: float = 0.55,
    diffuse: float = 0.45,
    timestamp: float = 0.0,
) -> OracleFrame:
    """Exact render by sphere tracing with Lambertian headlight shading."""
    if t_max is None:
        lo, hi = scene.bounds()
        t_max = 2.0 * float(np.linalg.norm(hi - lo))
    o, d, zfac = camera_rays(intr, pose)
    t, hit = trace_rays(scene, o, d, t_max)
    H, W = intr.height, intr.width
    rgb = np.zeros((H * W, 3))
    depth = np.zeros(H * W)
    labels = np.full(H * W, -1, dtype=np.int64)
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        _, cls, alb = scene_sdf(scene, p)
        n = scene_normals(scene, p)
        lam = np.clip(-(n * d[hit]).sum(axis=-1), 0.0, 1.0)
        rgb[hit] = np.clip(alb * (ambient + diffuse * lam)[:, None], 0.0, 1.0)
        depth[hit] = t[hit] * zfac[hit]
        labels[hit] = cls
    sem = labels_to_colors(labels, palette)
    return OracleFrame(
        timestamp=timestamp,
        pose=pose,
        rgb=rgb.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        semantic=sem.reshape(H, W, 3),
        labels=labels.reshape(H, W),
    )


# ---------------------------------------------------------------------------
# preset scenes


def make_room_scene() -> AnalyticScene:
    """Single room with furniture-like solids, 5 semantic classes."""
    prims = [
        ScenePrimitive(
            "room", 0, (0.82, 0.80, 0.74), center=(0, 0, 1.25),
            half_extents=(2.0, 1.6, 1.25),
        ),
        ScenePrimitive(
            "box", 1, (0.55, 0.27, 0.07), center=(0.8, 0.0, 0.25),
            half_extents=(0.5, 0.35, 0.25),
        ),
        ScenePrimitive("sphere", 2, (0.85, 0.1, 0.1), center=(-0.9, 0.7, 0.35), radius=0.35),
        ScenePrimitive(
            "box", 3, (0.1, 0.3, 0.8), center=(-0.9, -0.8, 0.5),
            half_extents=(0.3, 0.3, 0.5),
        ),
        ScenePrimitive("sphere", 4, (0.95, 0.8, 0.1), center=(0.7, 1.0, 0.2), radius=0.2),
    ]
    return AnalyticScene(prims, name="room")


def make_apartment_scene(edge: float = 5.0) -> AnalyticScene:
    """Two rooms joined by a doorway, sized to straddle a subspace boundary."""
    half = edge  # total span 2*edge along x: one room per subspace cube
    prims = [
        ScenePrimitive(
            "room", 0, (0.82, 0.80, 0.74), center=(0, 0, 1.25),
            half_extents=(half, 1.8, 1.25),
        ),
        # dividing wall at x = 0 with a doorway gap at y in (-0.5, 0.5)
        ScenePrimitive(
            "box", 1, (0.7, 0.7, 0.68), center=(0, 1.15, 1.25),
            half_extents=(0.1, 0.65, 1.25),
        ),
        ScenePrimitive(
            "box", 1, (0.7, 0.7, 0.68), center=(0, -1.15, 1.25),
            half_extents=(0.1, 0.65, 1.25),
        ),
        ScenePrimitive("sphere", 2, (0.85, 0.1, 0.1), center=(-2.5, 0.6, 0.4), radius=0.4),
        ScenePrimitive(
            "box", 3, (0.1, 0.3, 0.8), center=(2.5, -0.7, 0.4),
            half_extents=(0.4, 0.4, 0.4),
        ),
    ]
    return AnalyticScene(prims, name="apartment")


# ---------------------------------------------------------------------------
# trajectories


def _validate_clearance(scene, positions, clearance=MIN_CAMERA_CLEARANCE):
    s = scene_sdf_only(scene, positions)
    if np.any(s < clearance):
        bad = int(np.argmin(s))
        raise ValueError(
            f"camera position {positions[bad]} has clearance {s[bad]:.3f} "
            f"< {clearance}"
        )


def generate_trajectory(
    scene: AnalyticScene,
    kind: str = "orbit",
    n_frames: int = 120,
    rate_hz: float = 30.0,
    seed: int = 0,
) -> list[Pose]:
    """Smooth camera paths in free space, looking at scene content.

    kinds: 'orbit' (circle around the centroid), 'lissajous' (bounded wander),
    'two_room_walk' (figure path crossing the apartment doorway).
    Raises if any camera position comes within 0.2 m of a surface.
    """
    lo, hi = scene.bounds()
    c = (lo + hi) / 2
    ext = (hi - lo) / 2
    ph = np.linspace(0.0, 2 * np.pi, n_frames, endpoint=False)
    rng = np.random.default_rng(seed)
    if kind == "orbit":
        r = 0.45 * min(ext[0], ext[1])
        eye = np.stack(
            [
                c[0] + r * np.cos(ph),
                c[1] + r * np.sin(ph),
                np.full(n_frames, c[2] + 0.2 * ext[2]),
            ],
            axis=1,
        )
        tgt = np.stack(
            [
                c[0] + 0.2 * r * np.cos(ph + np.pi),
                c[1] + 0.2 * r * np.sin(ph + np.pi),
                np.full(n_frames, c[2] - 0.1 * ext[2]),
            ],
            axis=1,
        )
    elif kind == "lissajous":
        a = 0.40 * ext
        eye = np.stack(
            [
                c[0] + a[0] * np.sin(2 * ph),
                c[1] + a[1] * np.sin(3 * ph + 0.7),
                c[2] + 0.3 + 0.25 * a[2] * np.sin(ph + 0.3),
            ],
            axis=1,
        )
        look_ph = ph + 2 * np.pi / n_frames * 5
        tgt = np.stack(
            [
                c[0] + 0.9 * a[0] * np.sin(2 * look_ph + 0.5),
                c[1] + 0.9 * a[1] * np.sin(3 * look_ph + 1.2),
                np.full(n_frames, c[2]),
            ],
            axis=1,
        )
    elif kind == "two_room_walk":
        # figure-eight through the doorway at x = 0
        ax = 0.55 * ext[0]
        eye = np.stack(
            [
                c[0] + ax * np.sin(ph),
                c[1] + 0.45 * np.sin(2 * ph),
                np.full(n_frames, c[2] + 0.1),
            ],
            axis=1,
        )
        ahead = np.roll(np.arange(n_frames), -max(1, n_frames // 24))
        tgt = eye[ahead] + rng.normal(0, 1e-3, (n_frames, 3))
    else:
        raise ValueError(f"unknown trajectory kind '{kind}'")
    _validate_clearance(scene, eye)
    poses = []
    for i in range(n_frames):
        poses.append(Pose.look_at(eye[i], tgt[i]))
    return poses


# ---------------------------------------------------------------------------
# corruption helpers


def sparsify_depth(depth: np.ndarray, percent: float, seed: int = 0) -> np.ndarray:
    """Zero out exactly round(percent/100 * n) distinct pixels."""
    if not 0.0 <= percent <= 100.0:
        raise ValueError("percent must be in [0, 100]")
    d = np.array(depth, copy=True)
    n = d.size
    k = int(round(percent / 100.0 * n))
    drop = np.random.default_rng(seed).choice(n, size=k, replace=False)
    d.reshape(-1)[drop] = 0.0
    return d


def jitter_semantics(
    semantic: np.ndarray, flip_rate: float, palette: Palette, seed: int = 0
) -> np.ndarray:
    """Reassign each labeled pixel to a uniformly random *other* class with
    probability flip_rate; unknown (black) pixels are untouched."""
    if not 0.0 <= flip_rate <= 1.0:
        raise ValueError("flip_rate must be in [0, 1]")
    labels, _ = colors_to_labels(semantic, palette)
    rng = np.random.default_rng(seed)
    known = labels >= 0
    flip = known & (rng.random(labels.shape) < flip_rate)
    n_cls = len(palette)
    if n_cls < 2 and flip.any():
        raise ValueError("cannot flip labels with a single-class palette")
    offs = rng.integers(1, n_cls, size=labels.shape)
    labels = np.where(flip, (labels + offs) % n_cls, labels)
    return labels_to_colors(labels, palette)


def perturb_trajectory(
    poses: list[Pose], sigma_t: float, sigma_r_deg: float = 0.0, seed: int = 0
) -> list[Pose]:
    """I.i.d. Gaussian noise on translations and (optionally) rotations."""
    rng = np.random.default_rng(seed)
    out = []
    for p in poses:
        t = p.t + rng.normal(0.0, sigma_t, 3)
        q = p.quat
        if sigma_r_deg > 0:
            rv = rng.normal(0.0, np.radians(sigma_r_deg), 3)
            q = (Rotation.from_rotvec(rv) * Rotation.from_quat(p.quat)).as_quat()
        out.append(Pose(q, t))
    return out


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class SyntheticDataset:
    scene_name: str
    intrinsics: CameraIntrinsics
    palette: Palette
    frames: list[OracleFrame]
    eval_frames: list[OracleFrame] = dc_field(default_factory=list)
    depth_scale: float = 5000.0

    def trajectory(self):
        return [f.pose for f in self.frames]

    def timestamps(self):
        return np.array([f.timestamp for f in self.frames])


def make_dataset(
    scene: AnalyticScene,
    intr: CameraIntrinsics,
    palette: Palette | None = None,
    trajectory_kind: str = "orbit",
    n_frames: int = 120,
    n_eval: int = 0,
    rate_hz: float = 30.0,
    seed: int = 0,
) -> SyntheticDataset:
    """Render a full synthetic sequence plus held-out evaluation poses.

    Eval poses interleave the training path at offset phases so they are
    novel views of the same content.
    """
    if palette is None:
        palette = build_palette(scene.num_classes())
    poses = generate_trajectory(scene, trajectory_kind, n_frames, rate_hz, seed)
    frames = [
        oracle_render(scene, p, intr, palette, timestamp=i / rate_hz)
        for i, p in enumerate(poses)
    ]
    eval_frames = []
    if n_eval > 0:
        jitter = [
            Pose(p.quat, p.t + 0.03 * np.array([np.sin(7 * k + 1), np.cos(5 * k), 0.5 * np.sin(3 * k)]))
            for k, p in enumerate(
                generate_trajectory(scene, trajectory_kind, n_eval, rate_hz, seed + 1)
            )
        ]
        eval_frames = [
            oracle_render(scene, p, intr, palette, timestamp=1e6 + k / rate_hz)
            for k, p in enumerate(jitter)
        ]
    return SyntheticDataset(
        scene_name=scene.name,
        intrinsics=intr,
        palette=palette,
        frames=frames,
        eval_frames=eval_frames,
    )
