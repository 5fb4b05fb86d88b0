import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from semmap.metrics import (
    Trajectory,
    align_umeyama,
    associate,
    ate_rmse,
    confusion_matrix,
    depth_scale_correction,
    l1_depth,
    psnr,
    report_from_confusion,
    segmentation_report,
    ssim,
)
from semmap.renderer import Pose


def make_traj(n=20, seed=0, dt=0.1):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-2, 2, (n, 3))
    quats = Rotation.random(n, random_state=seed).as_quat()
    return Trajectory(np.arange(n) * dt, pos, quats)


# ---------------------------------------------------------------------------
# trajectory container / association


def test_trajectory_validation():
    with pytest.raises(ValueError, match="empty"):
        Trajectory(np.array([]), np.zeros((0, 3)), np.zeros((0, 4)))
    with pytest.raises(ValueError, match="increasing"):
        Trajectory([0.0, 0.0], np.zeros((2, 3)), np.zeros((2, 4)))
    tr = make_traj(5)
    assert len(tr) == 5


def test_trajectory_pose_roundtrip():
    tr = make_traj(6)
    back = Trajectory.from_poses(tr.poses(), tr.timestamps)
    assert np.allclose(back.positions, tr.positions)
    # quaternion sign may flip under normalization; compare rotations
    for qa, qb in zip(back.quaternions, tr.quaternions):
        assert min(np.abs(qa - qb).max(), np.abs(qa + qb).max()) < 1e-12


def test_associate_exact_and_offset():
    gt = make_traj(20, dt=0.1)
    ie, ig = associate(gt, gt)
    assert np.array_equal(ie, np.arange(20)) and np.array_equal(ig, ie)
    est = Trajectory(gt.timestamps[5:10] + 0.004, gt.positions[5:10],
                     gt.quaternions[5:10])
    ie, ig = associate(est, gt, max_dt=0.02)
    assert np.array_equal(ig, np.arange(5, 10))
    with pytest.raises(ValueError, match="no timestamp"):
        associate(Trajectory([99.0], [[0, 0, 0]], [[0, 0, 0, 1]]), gt)


# ---------------------------------------------------------------------------
# alignment


def test_umeyama_recovers_rigid_transform():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(40, 3))
    R = Rotation.from_rotvec([0.3, -0.2, 0.9]).as_matrix()
    t = np.array([1.0, -2.0, 0.5])
    dst = src @ R.T + t
    s, R2, t2 = align_umeyama(src, dst)
    assert s == 1.0
    assert np.allclose(R2, R, atol=1e-12)
    assert np.allclose(t2, t, atol=1e-12)


def test_umeyama_recovers_scale():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(25, 3))
    R = Rotation.from_rotvec([0.1, 0.7, -0.4]).as_matrix()
    dst = 2.5 * src @ R.T + np.array([0.3, 0.0, -1.0])
    s, R2, _ = align_umeyama(src, dst, with_scale=True)
    assert s == pytest.approx(2.5, abs=1e-12)
    assert np.allclose(R2, R, atol=1e-12)
    assert np.linalg.det(R2) == pytest.approx(1.0)


def test_umeyama_rejects_degenerate_input():
    with pytest.raises(ValueError, match="at least 3"):
        align_umeyama(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5, dtype=float), [1.0, 0, 0])
    with pytest.raises(ValueError, match="degenerate"):
        align_umeyama(line, line * 2)
    with pytest.raises(ValueError, match="length"):
        align_umeyama(np.zeros((4, 3)), np.zeros((5, 3)))


def test_umeyama_handles_reflection_without_flipping():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(30, 3))
    dst = src.copy()
    dst[:, 2] *= -1  # mirrored cloud: best proper rotation, not a reflection
    _, R, _ = align_umeyama(src, dst)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# trajectory error


def test_ate_identical_is_zero():
    tr = make_traj(30)
    res = ate_rmse(tr, tr)
    assert res["rmse_m"] < 1e-12
    assert res["n_pairs"] == 30
    assert res["scale"] == 1.0


def test_ate_similarity_transform_recovered():
    gt = make_traj(30, seed=7)
    R = Rotation.from_rotvec([0.2, 0.1, -0.3]).as_matrix()
    est = Trajectory(
        gt.timestamps, 1.7 * gt.positions @ R.T + [0.5, 0, -2.0], gt.quaternions
    )
    res = ate_rmse(est, gt, with_scale=True)
    assert res["rmse_m"] < 1e-9
    assert res["scale"] == pytest.approx(1 / 1.7)
    # without scale estimation the residual stays large
    assert ate_rmse(est, gt, with_scale=False)["rmse_m"] > 0.1


def test_ate_gaussian_noise_level():
    gt = make_traj(500, seed=8)
    rng = np.random.default_rng(9)
    est = Trajectory(
        gt.timestamps, gt.positions + rng.normal(0, 0.01, (500, 3)), gt.quaternions
    )
    res = ate_rmse(est, gt)
    expect = 0.01 * np.sqrt(3)
    assert abs(res["rmse_m"] - expect) / expect < 0.2
    assert res["median_m"] <= res["mean_m"] * 1.2


# ---------------------------------------------------------------------------
# depth / image quality


def test_l1_depth_hand_value_and_mask():
    pred = np.array([[2.0, 3.0]])
    gt = np.array([[2.5, 0.0]])
    assert l1_depth(pred, gt) == pytest.approx(50.0)  # 0.5 m in cm
    gt2 = np.array([[2.5, 4.0]])
    assert l1_depth(pred, gt2, mask=[[True, False]]) == pytest.approx(50.0)
    with pytest.raises(ValueError, match="shapes"):
        l1_depth(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError, match="valid"):
        l1_depth(pred, np.zeros((1, 2)))


def test_depth_scale_correction_exact():
    rng = np.random.default_rng(10)
    pred = rng.uniform(0.5, 3.0, 100)
    assert depth_scale_correction(pred, 2.0 * pred) == pytest.approx(2.0)
    gt = 2.0 * pred
    gt[::3] = 0.0  # invalid gt pixels are excluded from the fit
    assert depth_scale_correction(pred, gt) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        depth_scale_correction(pred, np.zeros(100))


def test_psnr_hand_values():
    gt = np.zeros((8, 8, 3))
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0)
    assert psnr(gt + 0.01, gt) == pytest.approx(40.0)
    assert psnr(gt, gt) == np.inf
    assert psnr(gt + 0.1, gt, max_val=2.0) == pytest.approx(20.0 + 10 * np.log10(4))
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((5, 4)))


def test_ssim_bounds_and_ordering():
    rng = np.random.default_rng(11)
    img = rng.uniform(0, 1, (32, 32))
    assert ssim(img, img) == pytest.approx(1.0)
    noisy_a = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
    noisy_b = np.clip(img + rng.normal(0, 0.3, img.shape), 0, 1)
    sa, sb = ssim(noisy_a, img), ssim(noisy_b, img)
    assert sb < sa < 1.0
    assert -1.0 <= sb <= 1.0
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_constant_image_closed_forms():
    # constant images zero out variance terms: SSIM = (2ab + C1)/(a^2 + b^2 + C1)
    c1 = 0.01**2
    a = np.full((16, 16), 1.0)
    b = np.zeros((16, 16))
    assert ssim(a, b) == pytest.approx(c1 / (1 + c1), abs=1e-12)
    a2 = np.full((16, 16), 0.25)
    b2 = np.full((16, 16), 0.75)
    want = (2 * 0.25 * 0.75 + c1) / (0.25**2 + 0.75**2 + c1)
    assert ssim(a2, b2) == pytest.approx(want, abs=1e-12)
    assert ssim(b2, b2) == pytest.approx(1.0, abs=1e-12)


def test_ssim_multichannel_is_channel_mean():
    rng = np.random.default_rng(12)
    a = rng.uniform(0, 1, (20, 20, 3))
    b = rng.uniform(0, 1, (20, 20, 3))
    per = np.mean([ssim(a[..., c], b[..., c]) for c in range(3)])
    assert ssim(a, b) == pytest.approx(per)


# ---------------------------------------------------------------------------
# segmentation


def test_confusion_matrix_hand_case():
    gt = np.array([0, 1, 2, 2, -1, 0])
    pred = np.array([0, 1, 1, 2, 0, -1])  # unknowns on either side drop out
    conf = confusion_matrix(pred, gt, 3)
    assert np.array_equal(conf, [[1, 0, 0], [0, 1, 0], [0, 1, 1]])
    with pytest.raises(ValueError, match="n_classes"):
        confusion_matrix(np.array([3]), np.array([0]), 3)


def test_segmentation_report_hand_values():
    gt = np.array([0, 1, 2, 2])
    pred = np.array([0, 1, 1, 2])
    rep = segmentation_report(pred, gt, 3)
    assert rep.total_accuracy == pytest.approx(3 / 4)
    assert np.allclose(rep.per_class_iou, [1.0, 0.5, 0.5])
    assert rep.miou == pytest.approx((1.0 + 0.5 + 0.5) / 3)
    assert rep.class_accuracy == pytest.approx((1.0 + 1.0 + 0.5) / 3)
    assert rep.fw_miou == pytest.approx(0.25 * 1.0 + 0.25 * 0.5 + 0.5 * 0.5)
    assert np.array_equal(rep.classes_in_gt, [0, 1, 2])


def test_segmentation_absent_class_handling():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([0, 0, 1, 2])  # class 2 predicted but absent from gt, 3 unseen
    rep = segmentation_report(pred, gt, 4)
    assert np.array_equal(rep.classes_in_gt, [0, 1])
    assert rep.miou == pytest.approx((1.0 + 0.5) / 2)  # present classes only
    rep_all = segmentation_report(pred, gt, 4, include_absent_classes=True)
    assert rep_all.miou == pytest.approx((1.0 + 0.5 + 0.0) / 3)  # class 3 skipped
    assert np.isnan(rep_all.per_class_iou[3])


def test_report_from_confusion_matches_labels():
    gt = np.array([0, 1, 2, 2, 1, 0, 0])
    pred = np.array([0, 2, 2, 2, 1, 0, 1])
    a = segmentation_report(pred, gt, 3)
    b = report_from_confusion(confusion_matrix(pred, gt, 3))
    assert np.array_equal(a.confusion, b.confusion)
    assert a.miou == b.miou and a.fw_miou == b.fw_miou
    with pytest.raises(ValueError, match="empty"):
        segmentation_report(np.array([-1]), np.array([0]), 2)
