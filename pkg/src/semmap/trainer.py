"""Online map optimization from keyframes.

Each iteration samples one keyframe (recency-weighted), draws random pixels,
volume-renders them through the active subspace field, and applies Adam to
hand-computed gradients of the photometric / geometric / semantic losses.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .field import FieldParams, GradientBuffer, field_backward, forward_batch
from .keyframe_atlas import KeyframePolicy, SubspaceAtlas
from .renderer import (
    RenderConfig,
    accumulate,
    accumulate_backward,
    alpha_backward,
    alphas_from_sdf_sequence,
    camera_rays,
    hash01,
    intersect_aabb,
    pixel_indices_to_uv,
    render_image,
    sample_batch,
)

MODES = ("rgbd", "rgbd+semantic", "rgb", "rgb+semantic")


@dataclass
class TrainConfig:
    mode: str = "rgbd+semantic"
    pixels_per_iter: int = 1024
    lr_base: float = 1e-2
    warmup_iters: int = 2000
    decay_gamma: float = 0.95
    decay_every: int = 500
    recency_window: int = 10
    recency_boost: float = 5.0
    seed: int = 0
    w_photometric: float = 1.0
    w_geometric: float = 1.0
    w_semantic: float = 1.0
    mean_reduction: bool = True  # divide each term by its contributing pixel count

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.pixels_per_iter < 1:
            raise ValueError("pixels_per_iter must be >= 1")
        if self.lr_base <= 0:
            raise ValueError("lr_base must be positive")
        if self.warmup_iters < 1 or self.decay_every < 1:
            raise ValueError("schedule intervals must be >= 1")
        if not 0 < self.decay_gamma <= 1:
            raise ValueError("decay_gamma must be in (0, 1]")
        if self.recency_window < 0 or self.recency_boost < 1:
            raise ValueError("recency_window >= 0 and recency_boost >= 1 required")

    @property
    def use_depth(self) -> bool:
        return self.mode.startswith("rgbd")

    @property
    def use_semantic(self) -> bool:
        return self.mode.endswith("semantic")


@dataclass
class LossBreakdown:
    iteration: int
    total: float
    photometric: float
    geometric: float
    semantic: float
    lr: float
    kf_id: int
    subspace: int
    n_pixels: int
    n_depth_valid: int
    n_semantic_valid: int


@dataclass
class OptimizerState:
    """Adam first/second moments mirroring the field parameter layout."""

    m: GradientBuffer
    v: GradientBuffer
    step: int = 0

    @classmethod
    def for_params(cls, params: FieldParams) -> "OptimizerState":
        return cls(GradientBuffer(params), GradientBuffer(params))


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_base, then stepwise exponential decay."""
    if iteration < cfg.warmup_iters:
        return cfg.lr_base * (iteration + 1) / cfg.warmup_iters
    k = (iteration - cfg.warmup_iters) // cfg.decay_every
    return cfg.lr_base * cfg.decay_gamma**k


def adam_step(
    params: FieldParams,
    grads: GradientBuffer,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """In-place bias-corrected Adam update over every parameter array."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for (_, p), (_, g), (_, m), (_, v) in zip(
        params.named_arrays(), grads.named_arrays(),
        state.m.named_arrays(), state.v.named_arrays(),
    ):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# losses: each returns (value, d_value/d_pred, n_contributing)


def photometric_loss(pred_rgb, gt_rgb, mean_reduction=True):
    """Per-pixel L1 over channels: sum_p |I_gt - I_hat|_1."""
    pred_rgb = np.asarray(pred_rgb, dtype=np.float64)
    gt_rgb = np.asarray(gt_rgb, dtype=np.float64)
    r = pred_rgb - gt_rgb
    n = len(r)
    scale = 1.0 / n if (mean_reduction and n) else 1.0
    return float(np.abs(r).sum() * scale), np.sign(r) * scale, n


def geometric_loss(pred_depth, gt_depth, mean_reduction=True):
    """Per-pixel |d_gt - d_hat| over pixels with valid (nonzero) gt depth."""
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    valid = gt_depth != 0
    r = np.where(valid, pred_depth - gt_depth, 0.0)
    n = int(valid.sum())
    scale = 1.0 / n if (mean_reduction and n) else 1.0
    return float(np.abs(r).sum() * scale), np.sign(r) * scale, n


def semantic_loss(pred_sem, gt_sem, mean_reduction=True, palette=None):
    """Per-pixel Euclidean norm of the color residual; black gt (unknown
    label) pixels are excluded. With a palette the gt colors are validated."""
    pred_sem = np.asarray(pred_sem, dtype=np.float64)
    gt_sem = np.asarray(gt_sem, dtype=np.float64)
    known = np.any(gt_sem != 0.0, axis=-1)
    if palette is not None and known.any():
        cols = palette.colors()
        d = np.linalg.norm(gt_sem[known][:, None, :] - cols[None], axis=-1)
        if d.min(axis=1).max() > 1e-6:
            raise ValueError("semantic gt contains colors outside the palette")
    r = np.where(known[..., None], pred_sem - gt_sem, 0.0)
    norms = np.linalg.norm(r, axis=-1)
    n = int(known.sum())
    scale = 1.0 / n if (mean_reduction and n) else 1.0
    safe = np.maximum(norms, 1e-12)[..., None]
    grad = np.where(known[..., None], r / safe, 0.0) * scale
    return float(norms.sum() * scale), grad, n


# ---------------------------------------------------------------------------
# per-iteration sampling


def select_keyframe(kf_ids, cfg: TrainConfig, iteration: int) -> int:
    """Uniform over keyframes, with the recency_window most recent ones
    boosted by recency_boost; deterministic in (seed, iteration)."""
    if not kf_ids:
        raise ValueError("no keyframes to select from")
    ids = sorted(kf_ids)
    w = np.ones(len(ids))
    if cfg.recency_window > 0:
        w[-cfg.recency_window :] *= cfg.recency_boost
    cdf = np.cumsum(w / w.sum())
    u = float(hash01(cfg.seed, iteration, 1))
    return ids[int(np.searchsorted(cdf, u, side="right").clip(0, len(ids) - 1))]


def sample_pixels(n_pixels_total: int, p: int, cfg: TrainConfig, iteration: int):
    """p distinct pixel indices, deterministic in (seed, iteration)."""
    rng = np.random.default_rng((cfg.seed, iteration, 2))
    if p >= n_pixels_total:
        return np.arange(n_pixels_total)
    return rng.choice(n_pixels_total, size=p, replace=False)


def train_iteration(
    atlas: SubspaceAtlas,
    intr,
    tcfg: TrainConfig,
    rcfg: RenderConfig,
    opt_states: dict,
    iteration: int,
    palette=None,
    subspace_index: int | None = None,
) -> LossBreakdown:
    """One optimization step on one subspace field. Returns the loss record."""
    if subspace_index is None:
        withkf = atlas.subspaces_with_keyframes()
        if not withkf:
            raise ValueError("atlas holds no keyframes")
        if atlas.subspaces[atlas.active_index].keyframe_ids:
            subspace_index = atlas.active_index
        else:
            subspace_index = withkf[iteration % len(withkf)].index
    ss = atlas.subspaces[subspace_index]
    params = ss.field
    if subspace_index not in opt_states:
        opt_states[subspace_index] = OptimizerState.for_params(params)
    opt = opt_states[subspace_index]

    kf_id = select_keyframe(ss.keyframe_ids, tcfg, iteration)
    kf = atlas.keyframes[kf_id]
    pix = sample_pixels(intr.width * intr.height, tcfg.pixels_per_iter, tcfg, iteration)
    u, v = pixel_indices_to_uv(pix, intr)
    o, d, zfac = camera_rays(intr, kf.pose, u, v)
    o = atlas.global_to_local(o, subspace_index)

    # clip rays to the local field domain
    g = params.grid
    near0, far0 = intersect_aabb(o, d, g.domain_min, g.domain_max)
    near = np.maximum(rcfg.near, near0)
    far0 = np.minimum(far0, rcfg.far if rcfg.far is not None else np.inf)
    live = far0 > near
    far = np.where(live, far0, near * 2.0)

    t = sample_batch(near, far, rcfg.n_samples, rcfg.stratified, rcfg.seed + iteration, pix)
    pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
    out, tape = forward_batch(
        pts, params, want_color=True, want_semantic=tcfg.use_semantic, with_tape=True
    )
    R, N = len(pix), rcfg.n_samples
    sdf = out.sdf.reshape(R, N).astype(np.float64)
    rgb = out.rgb.reshape(R, N, 3).astype(np.float64)
    sem = out.semantic.reshape(R, N, 3).astype(np.float64)
    s = params.s
    alphas = alphas_from_sdf_sequence(sdf, s)
    alphas[~live] = 0.0
    comp = accumulate(alphas, t, rgb, sem)

    gt_rgb = kf.rgb.reshape(-1, 3)[pix]
    val_photo, d_rgb_out, n_px = photometric_loss(
        comp["rgb_out"], gt_rgb, tcfg.mean_reduction
    )
    d_rgb_out = d_rgb_out * tcfg.w_photometric
    val_geo, d_depth_out, n_depth = 0.0, None, 0
    if tcfg.use_depth:
        gt_z = kf.depth.reshape(-1)[pix]
        gt_ray = np.where((gt_z != 0) & live, gt_z / zfac, 0.0)
        val_geo, d_depth_out, n_depth = geometric_loss(
            comp["depth_out"], gt_ray, tcfg.mean_reduction
        )
        d_depth_out = d_depth_out * tcfg.w_geometric
    val_sem, d_sem_out, n_sem = 0.0, None, 0
    if tcfg.use_semantic and kf.semantic is not None:
        gt_sem = kf.semantic.reshape(-1, 3)[pix]
        val_sem, d_sem_out, n_sem = semantic_loss(
            comp["sem_out"], gt_sem, tcfg.mean_reduction, palette
        )
        d_sem_out = d_sem_out * tcfg.w_semantic

    d_alpha, d_rgb_pts, d_sem_pts = accumulate_backward(
        alphas, t, comp["transmittance"], rgb, sem,
        d_rgb_out=d_rgb_out, d_sem_out=d_sem_out, d_depth_out=d_depth_out,
    )
    d_alpha[~live] = 0.0
    d_sdf, d_s = alpha_backward(sdf, s, d_alpha)

    grads = field_backward(
        tape,
        params,
        d_sdf=d_sdf.reshape(-1),
        d_rgb=d_rgb_pts.reshape(-1, 3) if d_rgb_pts is not None else None,
        d_semantic=(
            d_sem_pts.reshape(-1, 3)
            if (d_sem_pts is not None and tcfg.use_semantic) else None
        ),
    )
    grads.s_log += params.dtype.type(d_s * s)
    grads.check_finite(f"iteration {iteration}")
    lr = lr_at(iteration, tcfg)
    adam_step(params, grads, opt, lr)

    total = (
        tcfg.w_photometric * val_photo
        + tcfg.w_geometric * val_geo
        + tcfg.w_semantic * val_sem
    )
    return LossBreakdown(
        iteration=iteration,
        total=total,
        photometric=val_photo,
        geometric=val_geo,
        semantic=val_sem,
        lr=lr,
        kf_id=kf_id,
        subspace=subspace_index,
        n_pixels=n_px,
        n_depth_valid=n_depth,
        n_semantic_valid=n_sem,
    )


# ---------------------------------------------------------------------------
# drivers


def ingest_frames(
    atlas: SubspaceAtlas,
    frames,
    intr,
    policy: KeyframePolicy = KeyframePolicy(),
    frustum_assign: bool | None = None,
):
    """Stream frames through the keyframe policy. Returns inserted kf ids."""
    if frustum_assign is None:
        frustum_assign = not atlas.single
    inserted = []
    for i, f in enumerate(frames):
        kid = atlas.maybe_insert_keyframe(
            i, f.timestamp, f.pose, f.rgb, f.depth, f.semantic,
            policy=policy, intr=intr if frustum_assign else None,
        )
        if kid is not None:
            inserted.append(kid)
    return inserted


def run_training(
    dataset,
    atlas: SubspaceAtlas,
    tcfg: TrainConfig,
    rcfg: RenderConfig,
    iterations: int,
    policy: KeyframePolicy = KeyframePolicy(),
    log_path=None,
    log_every: int = 25,
    progress_every: int = 0,
):
    """Ingest the dataset's frames, then optimize for the given iterations.

    Returns (log_rows, opt_states); log rows land in a CSV when log_path is
    given. Subspaces with keyframes are trained round-robin, the active one
    handled like any other once ingestion is done.
    """
    ingest_frames(atlas, dataset.frames, dataset.intrinsics, policy)
    withkf = [s.index for s in atlas.subspaces_with_keyframes()]
    if not withkf:
        raise ValueError("keyframe policy inserted nothing")
    opt_states: dict = {}
    rows = []
    t0 = time.perf_counter()
    for it in range(iterations):
        ssi = withkf[it % len(withkf)]
        lb = train_iteration(
            atlas, dataset.intrinsics, tcfg, rcfg, opt_states, it,
            palette=dataset.palette, subspace_index=ssi,
        )
        if it % log_every == 0 or it == iterations - 1:
            rows.append(
                {
                    "iteration": lb.iteration,
                    "subspace": lb.subspace,
                    "kf_id": lb.kf_id,
                    "lr": lb.lr,
                    "photometric": lb.photometric,
                    "geometric": lb.geometric,
                    "semantic": lb.semantic,
                    "total": lb.total,
                    "n_pixels": lb.n_pixels,
                    "wall_ms": (time.perf_counter() - t0) * 1e3,
                }
            )
        if progress_every and it % progress_every == 0:
            print(f"iter {it:6d} total {lb.total:.4f} lr {lb.lr:.2e}", flush=True)
    if log_path is not None and rows:
        with open(log_path, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            wr.writeheader()
            wr.writerows(rows)
    return rows, opt_states


def evaluate_views(
    field_like,
    frames,
    intr,
    rcfg: RenderConfig,
    palette=None,
    s: float | None = None,
    center=None,
    fit_depth_scale: bool = False,
    keep_images: bool = False,
):
    """Render each frame's pose and score against its ground truth.

    Returns per-view metric rows plus aggregate means; segmentation is scored
    from decoded labels pooled over all views when a palette is given. With
    fit_depth_scale a single least-squares scale (for scale-ambiguous
    depth-free training) is fit over all views before the depth L1.
    """
    from .metrics import (
        depth_scale_correction,
        l1_depth,
        psnr,
        segmentation_report,
        ssim,
    )
    from .semantics import colors_to_labels

    rendered = []
    for fr in frames:
        pose = fr.pose if center is None else fr.pose.translated(-np.asarray(center))
        rendered.append(render_image(pose, intr, field_like, rcfg, s=s))
    scale = 1.0
    if fit_depth_scale:
        pred = np.concatenate([img["depth"].ravel() for img in rendered])
        gt = np.concatenate([fr.depth.ravel() for fr in frames])
        scale = depth_scale_correction(pred, gt)
    rows = []
    conf_pred, conf_gt = [], []
    for fr, img in zip(frames, rendered):
        row = {
            "timestamp": fr.timestamp,
            "psnr": psnr(img["rgb"], fr.rgb),
            "ssim": ssim(img["rgb"], fr.rgb),
        }
        if np.any(fr.depth != 0):
            row["l1_depth_cm"] = l1_depth(scale * img["depth"], fr.depth)
        if palette is not None and fr.semantic is not None:
            pl, _ = colors_to_labels(img["semantic"], palette)
            gl, _ = colors_to_labels(fr.semantic, palette)
            conf_pred.append(pl.reshape(-1))
            conf_gt.append(gl.reshape(-1))
        rows.append(row)
    agg = {
        k: float(np.mean([r[k] for r in rows if k in r]))
        for k in ("psnr", "ssim", "l1_depth_cm")
        if any(k in r for r in rows)
    }
    agg["depth_scale"] = scale
    report = None
    if palette is not None and conf_gt:
        pl = np.concatenate(conf_pred)
        gl = np.concatenate(conf_gt)
        # all-unknown predictions (e.g. a barely trained field rendering
        # black) leave nothing to score; skip instead of failing the eval
        if np.any((pl >= 0) & (gl >= 0)):
            report = segmentation_report(pl, gl, len(palette))
            agg["miou"] = report.miou
            agg["total_accuracy"] = report.total_accuracy
    out = {"views": rows, "aggregate": agg, "segmentation": report}
    if keep_images:
        out["images"] = rendered
    return out
