import logging
import math

import numpy as np
import pytest

from app.errors import DegenerateAlignmentError, EmptyEvaluationError, ShapeError
from app.evaluation import (
    METRIC_COLUMNS,
    EvalConfig,
    align_umeyama,
    ate,
    compute_errors,
    depth_metrics,
    lower_median,
    median_scale,
    range_filtered_metrics,
)
from app.geometry import pose_from_params, rotation_from_axis_angle

NO_SCALING = EvalConfig(median_scaling=False)


def test_lower_median():
    assert lower_median([3.0, 1.0, 2.0]) == 2.0
    assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0
    with pytest.raises(EmptyEvaluationError):
        lower_median([])


def test_median_scale_cancels_global_scale():
    gt = np.array([[2.0, 4.0], [8.0, 16.0]])
    scaled, s = median_scale(gt, gt)
    assert s == 1.0 and np.array_equal(scaled, gt)
    scaled, s = median_scale(gt / 1.25, gt)
    assert s == pytest.approx(1.25, rel=1e-12)
    assert np.allclose(scaled, gt, rtol=1e-12)


def test_perfect_prediction():
    gt = np.array([[1.0, 5.0, 20.0]])
    metrics = depth_metrics(gt, gt)
    assert metrics.abs_rel == 0.0 and metrics.sq_rel == 0.0 and metrics.rmse == 0.0 and metrics.rmse_log == 0.0
    assert (metrics.delta1, metrics.delta2, metrics.delta3) == (1.0, 1.0, 1.0)


def test_delta_threshold_is_strict():
    gt = np.array([[1.0, 2.0, 4.0, 8.0]])
    metrics = depth_metrics(gt * 1.25, gt, cfg=NO_SCALING)
    assert metrics.delta1 == 0.0
    assert metrics.delta2 == 1.0


def test_hand_computed_three_pixels():
    gt = np.array([[2.0, 4.0, 10.0]])
    pred = np.array([[1.0, 5.0, 10.0]])
    metrics = depth_metrics(pred, gt, cfg=NO_SCALING)
    assert metrics.abs_rel == pytest.approx((0.5 + 0.25 + 0.0) / 3, abs=1e-12)
    assert metrics.sq_rel == pytest.approx((1.0 / 2 + 1.0 / 4) / 3, abs=1e-12)
    assert metrics.rmse == pytest.approx(math.sqrt(2.0 / 3), abs=1e-12)
    assert metrics.rmse_log == pytest.approx(math.sqrt((math.log(2) ** 2 + math.log(1.25) ** 2) / 3), abs=1e-12)
    # ratios 2, 1.25, 1
    assert metrics.delta1 == pytest.approx(1 / 3, abs=1e-12)
    assert metrics.delta2 == pytest.approx(2 / 3, abs=1e-12)
    assert metrics.delta3 == pytest.approx(2 / 3, abs=1e-12)


def test_median_scaling_applies_before_metrics():
    gt = np.array([[2.0, 4.0, 10.0]])
    assert depth_metrics(gt * 3.0, gt).abs_rel == pytest.approx(0.0, abs=1e-12)


def test_cap_and_valid_mask():
    gt = np.array([[5.0, 90.0, 0.0, 10.0]])
    pred = np.array([[5.0, 1.0, 3.0, 20.0]])
    valid = np.array([[True, True, True, False]])
    metrics = depth_metrics(pred, gt, valid, NO_SCALING)
    assert metrics.abs_rel == 0.0
    with pytest.raises(EmptyEvaluationError):
        depth_metrics(pred, np.zeros((1, 4)))
    with pytest.raises(ShapeError):
        depth_metrics(pred, gt[:, :3])


def test_predictions_are_clamped():
    gt = np.array([[10.0, 10.0]])
    pred = np.array([[200.0, 10.0]])
    metrics = depth_metrics(pred, gt, cfg=NO_SCALING)
    assert metrics.abs_rel == pytest.approx((70.0 / 10.0) / 2)


def test_metric_row_order():
    metrics = compute_errors(np.array([2.0]), np.array([1.0]))
    assert metrics.row() == [getattr(metrics, name) for name in METRIC_COLUMNS]
    assert METRIC_COLUMNS[0] == "abs_rel" and METRIC_COLUMNS[-1] == "delta3"


def test_single_populated_bin():
    gt = np.full((3, 3), 5.0)
    result = range_filtered_metrics(gt, gt)
    assert list(result.bins) == ["0-10"]
    assert result.bins["0-10"].fraction == 1.0
    assert result.bins["0-10"].metrics.abs_rel == 0.0


def test_bin_fractions_follow_depth_distribution():
    rng = np.random.default_rng(0)
    gt = rng.uniform(1e-6, 80.0, size=(100, 100))
    result = range_filtered_metrics(gt, gt)
    n = gt.size
    for key, width in (("0-10", 10.0), ("10-30", 20.0), ("30-80", 50.0)):
        p = width / 80.0
        assert abs(result.bins[key].fraction - p) < 5 * math.sqrt(p * (1 - p) / n)
        assert result.bins[key].metrics.abs_rel == 0.0
        assert result.bins[key].metrics.delta1 == 1.0


def test_bins_share_one_scale():
    gt = np.array([[5.0, 6.0, 20.0, 25.0, 50.0]])
    pred = gt / 2.0
    pred[0, 0] = 1.0
    result = range_filtered_metrics(pred, gt)
    assert result.scale == pytest.approx(20.0 / 10.0)
    assert result.bins["10-30"].metrics.abs_rel == pytest.approx(0.0, abs=1e-12)
    assert result.bins["0-10"].metrics.abs_rel > 0.0


def test_bin_edges_are_half_open():
    gt = np.array([[10.0, 30.0]])
    result = range_filtered_metrics(gt, gt)
    assert result.bins["0-10"].count == 1
    assert result.bins["10-30"].count == 1
    assert "30-80" not in result.bins


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(range_bins=[(10.0, 5.0)])
    with pytest.raises(ValueError):
        EvalConfig(range_bins=[(0.0, 20.0), (10.0, 30.0)])


def _trajectory(rng, n=8):
    return np.cumsum(rng.normal(size=(n, 3)), axis=0)


def test_ate_identical_trajectories(rng):
    traj = _trajectory(rng)
    result = ate(traj, traj)
    assert result.mean == pytest.approx(0.0, abs=1e-9)
    assert result.std == pytest.approx(0.0, abs=1e-9)
    assert result.snippets == 4


def test_ate_absorbs_rigid_transform(rng):
    gt = _trajectory(rng)
    rotation = rotation_from_axis_angle([0.3, -1.2, 0.5])
    pred = gt @ rotation.T + np.array([5.0, -2.0, 1.0])
    assert ate(pred, gt, align_scale=False).mean == pytest.approx(0.0, abs=1e-9)


def test_ate_scale_alignment(rng):
    gt = _trajectory(rng)
    assert ate(2.0 * gt, gt, align_scale=True).mean == pytest.approx(0.0, abs=1e-9)
    assert ate(2.0 * gt, gt, align_scale=False).mean > 1e-3


def test_ate_accepts_poses_and_short_trajectories(rng):
    params = rng.normal(size=(3, 6))
    poses = [pose_from_params(p) for p in params]
    result = ate(poses, poses)
    assert result.snippets == 1
    assert result.mean == pytest.approx(0.0, abs=1e-9)


def test_ate_errors(rng):
    traj = _trajectory(rng)
    with pytest.raises(ShapeError):
        ate(traj, traj[:5])
    with pytest.raises(DegenerateAlignmentError):
        ate(np.zeros((5, 3)), traj[:5])


def test_umeyama_handles_reflection(rng):
    pred = rng.normal(size=(10, 3))
    gt = pred * np.array([1.0, 1.0, -1.0])
    _, rotation, _ = align_umeyama(pred, gt)
    assert np.linalg.det(rotation) == pytest.approx(1.0)


def test_ate_absorbs_similarity_transform(rng):
    gt = _trajectory(rng)
    rotation = rotation_from_axis_angle([-0.7, 0.2, 1.1])
    pred = 0.37 * gt @ rotation.T + np.array([-3.0, 4.0, 0.5])
    assert ate(pred, gt, align_scale=True).mean == pytest.approx(0.0, abs=1e-9)
    assert ate(pred, gt, align_scale=False).mean > 1e-3


def test_ate_logs_snippet_summary(rng, caplog):
    traj = _trajectory(rng)
    with caplog.at_level(logging.DEBUG, logger="app.evaluation"):
        ate(traj, traj, align_scale=False)
    assert "ATE over 4 snippets of 5 poses (align_scale=False)" in caplog.text
