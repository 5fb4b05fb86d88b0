"""Ray generation and SDF volume rendering.

Camera convention: z forward, x right, y down. Rendering follows the
density-free SDF formulation: per-sample opacity is derived from the drop of
a sigmoid-mapped SDF between consecutive samples, and colors / semantics /
depth are alpha-composited front to back.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import expit

DENOM_FLOOR = 1e-12  # keeps the opacity ratio defined when the sigmoid saturates


# ---------------------------------------------------------------------------
# deterministic per-ray RNG (splitmix-style), order independent by design


def hash01(seed: int, a, b) -> np.ndarray:
    """Uniform [0,1) floats keyed by (seed, a, b); vectorized over a/b."""
    with np.errstate(over="ignore"):
        x = (
            np.uint64(seed % 2**64) * np.uint64(0x9E3779B97F4A7C15)
            ^ np.asarray(a, dtype=np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
            ^ np.asarray(b, dtype=np.uint64) * np.uint64(0x94D049BB133111EB)
        )
        x = np.asarray(x, dtype=np.uint64)
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
    return (x >> np.uint64(11)).astype(np.float64) * (2.0**-53)


# ---------------------------------------------------------------------------
# poses and cameras


@dataclass
class Pose:
    """Rigid camera-to-world transform; quaternion is xyzw, unit norm."""

    quat: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.quat)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} not within 1e-6 of 1")
        self.quat = self.quat / n

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def inverse(self) -> "Pose":
        r = Rotation.from_quat(self.quat).inv()
        return Pose(r.as_quat(), -r.apply(self.t))

    def compose(self, other: "Pose") -> "Pose":
        """self @ other as transforms (apply other first)."""
        r = Rotation.from_quat(self.quat)
        ro = Rotation.from_quat(other.quat)
        return Pose((r * ro).as_quat(), r.apply(other.t) + self.t)

    def translated(self, offset) -> "Pose":
        return Pose(self.quat.copy(), self.t + np.asarray(offset, dtype=np.float64))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, rot: np.ndarray, t) -> "Pose":
        return cls(Rotation.from_matrix(rot).as_quat(), t)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at eye with +z toward target; +y chosen opposite to up."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("look_at target coincides with eye")
        fwd = fwd / n
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            up = np.array([0.0, 1.0, 0.0])
            right = np.cross(fwd, up)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        return cls.from_matrix(rot, eye)


def rotation_angle_deg(a: Pose, b: Pose) -> float:
    """Geodesic angle between two orientations, in degrees."""
    r = Rotation.from_quat(a.quat).inv() * Rotation.from_quat(b.quat)
    return float(np.degrees(r.magnitude()))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def scaled(self, w: int, h: int) -> "CameraIntrinsics":
        sx, sy = w / self.width, h / self.height
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, w, h
        )

    @classmethod
    def simple(cls, width: int, height: int, fov_deg: float = 60.0):
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def pixel_to_ray(u, v, intr: CameraIntrinsics, pose: Pose):
    """World-space (origin, unit direction) through pixel center (u, v)."""
    o, d, _ = camera_rays(intr, pose, np.atleast_1d(u), np.atleast_1d(v))
    if np.isscalar(u) or np.asarray(u).ndim == 0:
        return o[0], d[0]
    return o, d


def camera_rays(intr: CameraIntrinsics, pose: Pose, u=None, v=None):
    """Rays through pixel centers.

    With u/v omitted, covers the full image in row-major order. Returns
    (origins (n,3), dirs (n,3) unit, zfac (n,)) where zfac is the camera-z
    component of each unit direction: z_depth = ray_distance * zfac.
    """
    if u is None:
        vv, uu = np.mgrid[0 : intr.height, 0 : intr.width]
        u, v = uu.ravel(), vv.ravel()
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cam = np.stack(
        [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1
    )
    norm = np.linalg.norm(cam, axis=-1, keepdims=True)
    cam = cam / norm
    d = cam @ pose.rotation_matrix().T
    o = np.broadcast_to(pose.t, d.shape).copy()
    return o, d, 1.0 / norm[..., 0]


def pixel_indices_to_uv(idx, intr: CameraIntrinsics):
    idx = np.asarray(idx)
    return idx % intr.width, idx // intr.width


# ---------------------------------------------------------------------------
# sampling


def sample_along_ray(near, far, n, stratified=True, seed=0, ray_id=0) -> np.ndarray:
    """Depths of n samples in [near, far]: bin midpoints, jittered if stratified."""
    t = sample_batch(
        np.asarray([near], dtype=np.float64),
        np.asarray([far], dtype=np.float64),
        n,
        stratified,
        seed,
        np.asarray([ray_id]),
    )
    return t[0]

def sample_batch(near, far, n, stratified, seed, ray_ids) -> np.ndarray:
    """(R, n) sample depths, strictly increasing per ray.

    Stratified jitter is keyed by (seed, ray_id, bin) so results are
    independent of batch composition and evaluation order.
    """
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    if np.any(~(near > 0)) or np.any(~(far > near)):
        raise ValueError("require 0 < near < far for all rays")
    edges = np.linspace(0.0, 1.0, n + 1)
    lo, width = edges[:-1], edges[1] - edges[0]
    if stratified:
        u = hash01(seed, np.asarray(ray_ids)[:, None], np.arange(n)[None, :])
    else:
        u = 0.5
    frac = lo[None, :] + u * width
    return near[:, None] + frac * (far - near)[:, None]


def intersect_aabb(origins, dirs, box_min, box_max):
    """Slab test: (tmin, tmax) of each ray against an axis-aligned box.

    Rays that miss have tmin > tmax. Parallel-axis rays handled via inf.
    """
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (box_min - origins) * inv
        t1 = (box_max - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    return lo.max(axis=-1), hi.min(axis=-1)


# ---------------------------------------------------------------------------
# opacity / compositing math


def alpha_from_sdf(sdf_i, sdf_next, s):
    """Opacity from the sigmoid-SDF drop between consecutive samples.

    alpha = max((sig(s*sdf_i) - sig(s*sdf_next)) / sig(s*sdf_i), 0); positive
    only where the mapped SDF decreases, i.e. the ray is entering a surface.
    """
    u = expit(np.multiply(s, sdf_i))
    un = expit(np.multiply(s, sdf_next))
    return np.maximum((u - un) / np.maximum(u, DENOM_FLOOR), 0.0)


def alphas_from_sdf_sequence(sdf, s):
    """Per-sample alphas along rays (..., N): the last SDF is duplicated so
    the final sample gets alpha 0 rather than an out-of-range lookup."""
    sdf_next = np.concatenate([sdf[..., 1:], sdf[..., -1:]], axis=-1)
    return alpha_from_sdf(sdf, sdf_next, s)


def transmittance(alphas):
    """T_i = prod_{j<i} (1 - alpha_j), leading 1."""
    shifted = np.cumprod(1.0 - alphas[..., :-1], axis=-1)
    ones = np.ones_like(alphas[..., :1])
    return np.concatenate([ones, shifted], axis=-1)


def accumulate(alphas, t, rgb=None, sem=None):
    """Front-to-back compositing.

    Returns dict with weights w = T*alpha, transmittance T, depth_out
    (sum w*t, a ray distance), and rgb_out / sem_out when inputs given.
    """
    T = transmittance(alphas)
    w = T * alphas
    out = {"weights": w, "transmittance": T, "depth_out": (w * t).sum(axis=-1)}
    out["acc"] = w.sum(axis=-1)
    if rgb is not None:
        out["rgb_out"] = (w[..., None] * rgb).sum(axis=-2)
    if sem is not None:
        out["sem_out"] = (w[..., None] * sem).sum(axis=-2)
    return out


def accumulate_backward(
    alphas, t, T, rgb, sem, d_rgb_out=None, d_sem_out=None, d_depth_out=None
):
    """Gradients of the compositing step.

    With per-weight upstream g_i = dL/dw_i, the alpha gradient follows the
    reverse recurrence over T_i = T_{i-1} (1 - alpha_{i-1}):
      dT_i = g_i alpha_i + dT_{i+1} (1 - alpha_i),  dalpha_i = T_i (g_i - dT_{i+1}).
    Returns (d_alpha, d_rgb, d_sem); the latter two are None when the
    matching upstream gradient is None.
    """
    R, N = alphas.shape
    g = np.zeros((R, N), dtype=alphas.dtype)
    d_rgb = d_sem = None
    if d_depth_out is not None:
        g += d_depth_out[:, None] * t
    if d_rgb_out is not None:
        g += np.einsum("rc,rnc->rn", d_rgb_out, rgb)
        w = T * alphas
        d_rgb = w[..., None] * d_rgb_out[:, None, :]
    if d_sem_out is not None:
        g += np.einsum("rc,rnc->rn", d_sem_out, sem)
        w = T * alphas
        d_sem = w[..., None] * d_sem_out[:, None, :]
    d_alpha = np.empty_like(alphas)
    d_alpha[:, N - 1] = T[:, N - 1] * g[:, N - 1]
    dT_next = g[:, N - 1] * alphas[:, N - 1]
    for i in range(N - 2, -1, -1):
        d_alpha[:, i] = T[:, i] * (g[:, i] - dT_next)
        dT_next = g[:, i] * alphas[:, i] + dT_next * (1.0 - alphas[:, i])
    return d_alpha, d_rgb, d_sem


def alpha_backward(sdf, s, d_alpha):
    """Gradients of alphas_from_sdf_sequence w.r.t. the SDF sequence and s.

    Returns (d_sdf (..., N), d_s scalar). Zero-clamped entries pass no
    gradient; the duplicated-last-sample convention is honored.
    """
    u = expit(s * sdf)
    un = np.concatenate([u[..., 1:], u[..., -1:]], axis=-1)
    den = np.maximum(u, DENOM_FLOOR)
    raw = (u - un) / den
    active = (raw > 0.0).astype(sdf.dtype)
    da = d_alpha * active
    # alpha = (u_i - u_next) / den; den depends on u_i unless floored
    d_ui = da / den
    d_un = -da / den
    floored = u < DENOM_FLOOR
    d_den = np.where(floored, 0.0, -da * (u - un) / den**2)
    d_u = d_ui + d_den
    # scatter next-sample contributions back one slot; last slot feeds itself
    d_u_from_next = np.zeros_like(d_u)
    d_u_from_next[..., 1:] += d_un[..., :-1]
    d_u_from_next[..., -1] += d_un[..., -1]
    d_u_total = d_u + d_u_from_next
    du_dx = u * (1.0 - u)  # derivative of expit at s*sdf
    d_sdf = d_u_total * du_dx * s
    d_s = float((d_u_total * du_dx * sdf).sum())
    return d_sdf, d_s


# ---------------------------------------------------------------------------
# full ray rendering


@dataclass
class RenderConfig:
    n_samples: int = 128
    near: float = 0.05
    far: float | None = None  # None: 1.5x the field/scene diagonal
    stratified: bool = True
    seed: int = 0
    chunk: int = 8192
    skip_empty: bool = False
    occupancy: "OccupancyGrid | None" = None

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.near <= 0:
            raise ValueError("near must be positive")
        if self.far is not None and self.far <= self.near:
            raise ValueError("far must exceed near")

    def with_overrides(self, **kw) -> "RenderConfig":
        return replace(self, **kw)


@dataclass
class RayBundle:
    """Per-ray rendering record: sample depths, raw field values, and the
    compositing chain. depth_out is a ray distance (not z-depth)."""

    t: np.ndarray
    sdf: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    weight: np.ndarray
    rgb_out: np.ndarray
    sem_out: np.ndarray
    depth_out: np.ndarray
    acc: np.ndarray
    rgb: np.ndarray | None = None
    sem: np.ndarray | None = None
    points: np.ndarray | None = None


@dataclass
class RaySample:
    """Single-ray view of RayBundle (same fields, leading axis dropped)."""

    t: np.ndarray
    sdf: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    weight: np.ndarray
    rgb_out: np.ndarray
    sem_out: np.ndarray
    depth_out: float


class OccupancyGrid:
    """Coarse conservative free-space cache for optional sample skipping.

    A cell is skippable when its cached center SDF exceeds a margin covering
    the cell diagonal plus the sigmoid support at the current sharpness; this
    is an approximation (the learned field is not exactly 1-Lipschitz), so
    the feature stays off by default.
    """

    def __init__(self, box_min, box_max, resolution=32):
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        self.resolution = int(resolution)
        self.values = None
        self.cell = (self.box_max - self.box_min) / self.resolution

    def refresh(self, sdf_fn, chunk=65536):
        r = self.resolution
        axes = [
            self.box_min[a] + (np.arange(r) + 0.5) * self.cell[a] for a in range(3)
        ]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        vals = np.empty(len(g))
        for i in range(0, len(g), chunk):
            vals[i : i + chunk] = sdf_fn(g[i : i + chunk])
        self.values = vals.reshape(r, r, r)

    def skippable(self, points, s):
        if self.values is None:
            return np.zeros(points.shape[:-1], dtype=bool)
        margin = 1.5 * 0.5 * np.linalg.norm(self.cell) + 8.0 / max(s, 1.0)
        ij = np.floor((points - self.box_min) / self.cell).astype(np.int64)
        inside = np.all((ij >= 0) & (ij < self.resolution), axis=-1)
        ij = np.clip(ij, 0, self.resolution - 1)
        v = self.values[ij[..., 0], ij[..., 1], ij[..., 2]]
        return inside & (v > margin)


def _normalize_eval(field_like):
    """Accept FieldParams or a callable points->(sdf[, rgb, sem])."""
    if hasattr(field_like, "hash_tables"):
        from . import field as _field

        fn = _field.make_eval(field_like)
        domain = (field_like.grid.domain_min, field_like.grid.domain_max)
        s = field_like.s
        return fn, domain, s
    return field_like, None, None


def _eval_to_triplet(out, n):
    if isinstance(out, tuple):
        sdf = np.asarray(out[0], dtype=np.float64).reshape(n)
        rgb = None if len(out) < 2 or out[1] is None else np.asarray(out[1])
        sem = None if len(out) < 3 or out[2] is None else np.asarray(out[2])
    else:
        sdf, rgb, sem = np.asarray(out, dtype=np.float64).reshape(n), None, None
    if rgb is None:
        rgb = np.zeros((n, 3))
    if sem is None:
        sem = np.zeros((n, 3))
    return sdf, rgb.reshape(n, 3), sem.reshape(n, 3)


def render_rays(
    origins,
    dirs,
    field_like,
    cfg: RenderConfig,
    s: float | None = None,
    ray_ids=None,
    keep_points: bool = False,
) -> RayBundle:
    """Sample, evaluate, and composite a batch of rays.

    field_like is FieldParams or a callable mapping (M,3) points to sdf or
    (sdf, rgb, sem). s (sigmoid sharpness) must be given for callables.
    Rays are clipped to the field domain box when one is known.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    eval_fn, domain, field_s = _normalize_eval(field_like)
    if s is None:
        s = field_s
    if s is None:
        raise ValueError("sigmoid sharpness s required for analytic callbacks")
    R = len(origins)
    near = np.full(R, cfg.near)
    if cfg.far is not None:
        far = np.full(R, cfg.far)
    elif domain is not None:
        far = np.full(R, cfg.near + 1.5 * np.linalg.norm(domain[1] - domain[0]))
    else:
        raise ValueError("far plane required when the field has no domain box")
    if domain is not None:
        lo, hi = intersect_aabb(origins, dirs, domain[0], domain[1])
        near = np.maximum(near, lo)
        far = np.minimum(far, hi)
        degenerate = far <= near  # rays missing the domain render as empty
        near = np.where(degenerate, cfg.near, near)
        far = np.where(degenerate, cfg.near * 2, far)
    else:
        degenerate = np.zeros(R, dtype=bool)
    if ray_ids is None:
        ray_ids = np.arange(R)
    t = sample_batch(near, far, cfg.n_samples, cfg.stratified, cfg.seed, ray_ids)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    if cfg.skip_empty and cfg.occupancy is not None:
        skip = cfg.occupancy.skippable(flat, s)
        sdf = np.full(len(flat), 1e3)
        rgb = np.zeros((len(flat), 3))
        sem = np.zeros((len(flat), 3))
        if np.any(~skip):
            out = eval_fn(flat[~skip])
            sdf[~skip], rgb[~skip], sem[~skip] = _eval_to_triplet(
                out, int((~skip).sum())
            )
    else:
        sdf, rgb, sem = _eval_to_triplet(eval_fn(flat), len(flat))
    N = cfg.n_samples
    sdf = sdf.reshape(R, N)
    rgb = rgb.reshape(R, N, 3)
    sem = sem.reshape(R, N, 3)
    alphas = alphas_from_sdf_sequence(sdf, s)
    alphas[degenerate] = 0.0
    out = accumulate(alphas, t, rgb, sem)
    return RayBundle(
        t=t,
        sdf=sdf,
        alpha=alphas,
        transmittance=out["transmittance"],
        weight=out["weights"],
        rgb_out=out["rgb_out"],
        sem_out=out["sem_out"],
        depth_out=out["depth_out"],
        acc=out["acc"],
        rgb=rgb,
        sem=sem,
        points=pts if keep_points else None,
    )


def render_ray(origin, direction, field_like, cfg: RenderConfig, s=None) -> RaySample:
    b = render_rays(
        np.asarray(origin)[None], np.asarray(direction)[None], field_like, cfg, s=s
    )
    return RaySample(
        t=b.t[0],
        sdf=b.sdf[0],
        alpha=b.alpha[0],
        transmittance=b.transmittance[0],
        weight=b.weight[0],
        rgb_out=b.rgb_out[0],
        sem_out=b.sem_out[0],
        depth_out=float(b.depth_out[0]),
    )


def render_image(
    pose: Pose,
    intr: CameraIntrinsics,
    field_like,
    cfg: RenderConfig,
    s=None,
    normals: bool = False,
    acc_threshold: float = 0.5,
):
    """Render full images: rgb, z-depth, semantic color, accumulation,
    and optionally world-space normals from the SDF spatial gradient.

    depth converts the composited ray distance to the z-depth convention
    used by stored depth images.
    """
    o, d, zfac = camera_rays(intr, pose)
    H, W = intr.height, intr.width
    rgb = np.zeros((H * W, 3))
    sem = np.zeros((H * W, 3))
    depth = np.zeros(H * W)
    acc = np.zeros(H * W)
    hit_pts = np.zeros((H * W, 3))
    for i in range(0, H * W, cfg.chunk):
        j = min(i + cfg.chunk, H * W)
        b = render_rays(o[i:j], d[i:j], field_like, cfg, s=s, ray_ids=np.arange(i, j))
        rgb[i:j] = b.rgb_out
        sem[i:j] = b.sem_out
        depth[i:j] = b.depth_out * zfac[i:j]
        acc[i:j] = b.acc
        hit_pts[i:j] = o[i:j] + b.depth_out[:, None] * d[i:j]
    out = {
        "rgb": rgb.reshape(H, W, 3),
        "depth": depth.reshape(H, W),
        "semantic": sem.reshape(H, W, 3),
        "acc": acc.reshape(H, W),
    }
    if normals:
        from . import field as _field

        nrm = np.zeros((H * W, 3))
        solid = acc > acc_threshold
        if np.any(solid) and hasattr(field_like, "hash_tables"):
            g = _field.sdf_spatial_gradient(hit_pts[solid], field_like)
            n = np.linalg.norm(g, axis=-1, keepdims=True)
            nrm[solid] = g / np.maximum(n, 1e-12)
        out["normal"] = nrm.reshape(H, W, 3)
    return out
