"""Evaluation metrics: trajectory error, depth / image quality, segmentation.

Conventions: depth L1 reported in centimeters over pixels where ground truth
is valid (nonzero); PSNR on [0,1] images with +inf for identical inputs;
SSIM with the standard 11x11 Gaussian window; segmentation metrics from an
explicit confusion matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from .renderer import Pose


@dataclass
class Trajectory:
    """Timestamped camera positions + orientations (xyzw quaternions)."""

    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        n = len(self.timestamps)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64).reshape(n, 4)
        if n == 0:
            raise ValueError("empty trajectory")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def from_poses(cls, poses: list[Pose], timestamps=None) -> "Trajectory":
        if timestamps is None:
            timestamps = np.arange(len(poses), dtype=np.float64)
        return cls(
            timestamps,
            np.stack([p.t for p in poses]),
            np.stack([p.quat for p in poses]),
        )

    def poses(self) -> list[Pose]:
        return [Pose(q, t) for q, t in zip(self.quaternions, self.positions)]


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02):
    """Greedy nearest-timestamp matching within max_dt.

    Returns (est_idx, gt_idx) index arrays; raises if nothing matches.
    """
    i = np.searchsorted(gt.timestamps, est.timestamps)
    lo = np.clip(i - 1, 0, len(gt) - 1)
    hi = np.clip(i, 0, len(gt) - 1)
    pick = np.where(
        np.abs(gt.timestamps[hi] - est.timestamps)
        < np.abs(gt.timestamps[lo] - est.timestamps),
        hi,
        lo,
    )
    ok = np.abs(gt.timestamps[pick] - est.timestamps) <= max_dt
    if not ok.any():
        raise ValueError(f"no timestamp pairs within {max_dt}s")
    return np.flatnonzero(ok), pick[ok]


def align_umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """Least-squares similarity/rigid alignment dst ~ s R src + t.

    Returns (s, R, t). Raises on < 3 pairs or a degenerate (rank < 2)
    point configuration where rotation is not observable.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("point sets differ in length")
    if len(src) < 3:
        raise ValueError("need at least 3 point pairs to align")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    if d[1] < 1e-12 * max(d[0], 1e-300):
        raise ValueError("degenerate point configuration: alignment rank < 2")
    sgn = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2, 2] = -1.0
    rot = u @ sgn @ vt
    if with_scale:
        var_s = (xs**2).sum() / len(src)
        scale = float(np.trace(np.diag(d) @ sgn) / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * rot @ mu_s
    return scale, rot, t


def ate_rmse(
    est: Trajectory, gt: Trajectory, with_scale: bool = False, max_dt: float = 0.02
):
    """Absolute trajectory error after alignment.

    Returns dict with rmse_m, mean_m, median_m, n_pairs, scale.
    """
    ie, ig = associate(est, gt, max_dt)
    p_est, p_gt = est.positions[ie], gt.positions[ig]
    s, rot, t = align_umeyama(p_est, p_gt, with_scale)
    resid = p_gt - (s * (p_est @ rot.T) + t)
    err = np.linalg.norm(resid, axis=1)
    return {
        "rmse_m": float(np.sqrt((err**2).mean())),
        "mean_m": float(err.mean()),
        "median_m": float(np.median(err)),
        "n_pairs": int(len(err)),
        "scale": float(s),
    }


def l1_depth(pred: np.ndarray, gt: np.ndarray, mask=None) -> float:
    """Mean |pred - gt| in centimeters over valid (gt != 0) pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    m = gt != 0
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("no valid depth pixels to compare")
    return float(np.abs(pred[m] - gt[m]).mean() * 100.0)


def depth_scale_correction(pred: np.ndarray, gt: np.ndarray) -> float:
    """Least-squares scalar s* minimizing ||s*pred - gt||^2 over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = (gt != 0) & (pred != 0)
    denom = (pred[m] ** 2).sum()
    if not m.any() or denom == 0:
        raise ValueError("cannot fit depth scale without valid overlapping pixels")
    return float((pred[m] * gt[m]).sum() / denom)


def psnr(pred: np.ndarray, gt: np.ndarray, max_val: float = 1.0) -> float:
    """10 log10(max^2 / MSE); +inf when images are identical."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    mse = ((pred - gt) ** 2).mean()
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(max_val**2 / mse))


def _gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2 * sigma**2))
    k /= k.sum()
    return np.outer(k, k)


def ssim(pred: np.ndarray, gt: np.ndarray, max_val: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Multichannel inputs average SSIM over channels; the map is cropped to
    pixels with full window support before averaging.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 3:
        return float(
            np.mean([ssim(pred[..., c], gt[..., c], max_val) for c in range(pred.shape[-1])])
        )
    if min(pred.shape) < 11:
        raise ValueError("images smaller than the 11x11 window")
    k = _gaussian_kernel()
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    mu_p = convolve(pred, k, mode="nearest")
    mu_g = convolve(gt, k, mode="nearest")
    var_p = convolve(pred * pred, k, mode="nearest") - mu_p**2
    var_g = convolve(gt * gt, k, mode="nearest") - mu_g**2
    cov = convolve(pred * gt, k, mode="nearest") - mu_p * mu_g
    num = (2 * mu_p * mu_g + c1) * (2 * cov + c2)
    den = (mu_p**2 + mu_g**2 + c1) * (var_p + var_g + c2)
    smap = num / den
    pad = 5
    return float(smap[pad:-pad, pad:-pad].mean())


@dataclass
class SegmentationReport:
    confusion: np.ndarray  # (n, n), rows = ground truth, cols = prediction
    total_accuracy: float
    class_accuracy: float
    miou: float
    fw_miou: float
    per_class_iou: np.ndarray
    classes_in_gt: np.ndarray


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    """Counts over pixels where both labels are known (>= 0)."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    m = (gt >= 0) & (pred >= 0)
    if np.any(gt[m] >= n_classes) or np.any(pred[m] >= n_classes):
        raise ValueError("labels exceed n_classes")
    idx = gt[m] * n_classes + pred[m]
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes
    )


def segmentation_report(
    pred, gt, n_classes: int, include_absent_classes: bool = False
) -> SegmentationReport:
    """Accuracy / IoU summary from per-pixel labels (or a confusion matrix).

    mIoU averages over classes present in ground truth by default; the flag
    switches to averaging over all classes (absent ones count IoU 0 unless
    also never predicted, which keeps them undefined and skipped).
    """
    if isinstance(pred, np.ndarray) and pred.ndim == 2 and pred.shape == (n_classes, n_classes) and gt is None:
        conf = pred.astype(np.int64)
    else:
        conf = confusion_matrix(pred, gt, n_classes)
    total = conf.sum()
    if total == 0:
        raise ValueError("empty confusion matrix: no jointly labeled pixels")
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1).astype(np.float64)
    pr_count = conf.sum(axis=0).astype(np.float64)
    union = gt_count + pr_count - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        cls_acc = np.where(gt_count > 0, tp / gt_count, np.nan)
    present = gt_count > 0
    if include_absent_classes:
        sel = ~np.isnan(iou)
    else:
        sel = present
    return SegmentationReport(
        confusion=conf,
        total_accuracy=float(tp.sum() / total),
        class_accuracy=float(np.nanmean(cls_acc[present])),
        miou=float(np.nanmean(iou[sel])),
        fw_miou=float(np.nansum((gt_count / total) * np.nan_to_num(iou))),
        per_class_iou=iou,
        classes_in_gt=np.flatnonzero(present),
    )


def report_from_confusion(conf: np.ndarray, include_absent_classes=False):
    conf = np.asarray(conf)
    return segmentation_report(conf, None, conf.shape[0], include_absent_classes)
