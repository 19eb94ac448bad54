import math

import numpy as np
import pytest

from _fixtures import corridor_pair, perturb, random_large_offset, random_small_offset
from vigs.camera import CameraIntrinsics
from vigs.errors import (EmptyFrameError, EmptyTargetError, InsufficientPointsError,
                         InvalidArgumentError)
from vigs.gicp import (GaussianCloud, GICPTracker, PointCloud, ReferenceMap, SpatialIndex,
                       TrackerConfig, backproject, estimate_covariances, find_correspondences,
                       gicp_cost, optimize_pose, prepare_frame, track_frame)
from vigs.se3 import Pose, pose_distance, so3_exp

INTR = CameraIntrinsics(100.0, 100.0, 20.0, 15.0, 40, 30)


def scene_cloud(seed=0, n=2000):
    """Three mutually orthogonal planes plus a few boxes: well constrained."""
    rng = np.random.default_rng(seed)
    from _fixtures import box_surface
    parts = [box_surface((-1, -1, 0), (1, 1, 0), n // 4, rng),
             box_surface((-1, 1, 0), (1, 1, 1), n // 4, rng),
             box_surface((1, -1, 0), (1, 1, 1), n // 4, rng),
             box_surface((-0.3, -0.2, 0), (0.1, 0.3, 0.4), n - 3 * (n // 4), rng)]
    return np.concatenate(parts)


def test_backproject_examples():
    depth = np.zeros((30, 40))
    depth[15, 20] = 2.0
    depth[15, 21] = 1.0
    intr = CameraIntrinsics(1.0, 1.0, 20.0, 15.0, 40, 30)
    pc = backproject(depth, intr)
    np.testing.assert_allclose(pc.points, [[0, 0, 2.0], [1, 0, 1]])
    assert len(backproject(np.zeros((30, 40)), intr)) == 0


def test_backproject_skips_far_and_samples_color():
    depth = np.full((30, 40), 25.0)
    depth[0, 0] = 1.0
    rgb = np.zeros((30, 40, 3), np.uint8)
    rgb[0, 0] = (255, 0, 51)
    pc = backproject(depth, INTR, rgb)
    assert len(pc) == 1
    np.testing.assert_allclose(pc.colors, [[1.0, 0.0, 0.2]])
    with pytest.raises(InvalidArgumentError):
        backproject(np.zeros((10, 10)), INTR)
    assert len(backproject(np.ones((30, 40)), INTR, stride=2)) == 15 * 20


def test_covariances_planar_normal():
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-1, 1, (300, 2)), np.zeros(300)]
    g = estimate_covariances(PointCloud(pts), 10, 1e-3)
    for c in g.covariances[:50]:
        vals, vecs = np.linalg.eigh(c)
        np.testing.assert_allclose(vals, [1e-3, 1, 1], atol=1e-9)
        assert abs(abs(vecs[2, 0]) - 1) < 1e-9


def test_covariances_spectrum_forced_and_psd():
    rng = np.random.default_rng(1)
    g = estimate_covariances(PointCloud(rng.normal(size=(200, 3))), 10, 1e-3)
    for c in g.covariances:
        np.testing.assert_allclose(c, c.T, atol=1e-12)
        np.testing.assert_allclose(np.linalg.eigvalsh(c), [1e-3, 1, 1], atol=1e-9)


def test_covariances_insufficient_points():
    with pytest.raises(InsufficientPointsError):
        estimate_covariances(PointCloud(np.zeros((5, 3)) + np.arange(5)[:, None]), 10)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrackerConfig(knn_k=3)
    with pytest.raises(InvalidArgumentError):
        TrackerConfig(max_iterations=0)
    with pytest.raises(InvalidArgumentError):
        TrackerConfig(translation_eps=0)


def test_correspondences_identity_gating_and_restore():
    g = estimate_covariances(PointCloud(scene_cloud(2, 500)), 10)
    idx = SpatialIndex(g)
    c = find_correspondences(g, idx, Pose(), 0.5)
    np.testing.assert_array_equal(c.src_idx, np.arange(len(g)))
    np.testing.assert_array_equal(c.tgt_idx, np.arange(len(g)))
    np.testing.assert_array_equal(c.distances, 0)
    # source 2 * max_dist away from everything: nothing within the gate
    shift = Pose(translation=[-10.0, 0, 0])
    moved = g.transformed(shift)
    assert len(find_correspondences(moved, idx, Pose(), 0.5)) == 0
    full = find_correspondences(moved, idx, shift.inverse(), 0.5)
    assert len(full) == len(g)
    # fused information for matching pairs
    r = Pose().rotation.matrix
    np.testing.assert_allclose(c.info[0], np.linalg.inv(g.covariances[0] + r @ g.covariances[0] @ r.T))


def test_correspondences_empty_target():
    with pytest.raises(EmptyTargetError):
        SpatialIndex(GaussianCloud(PointCloud(np.zeros((0, 3))), np.zeros((0, 3, 3))))


def test_optimize_identical_clouds():
    g = estimate_covariances(PointCloud(scene_cloud(3)), 10)
    r = optimize_pose(g, g, Pose(), TrackerConfig())
    assert r.converged and r.final_cost < 1e-10
    assert pose_distance(r.pose, Pose())[0] < 1e-12


def test_optimize_small_constructed_offset():
    g = estimate_covariances(PointCloud(scene_cloud(4)), 10)
    truth = Pose(so3_exp([0, 0, math.radians(5)]), [0.05, 0.02, -0.03])
    r = optimize_pose(g, g.transformed(truth), Pose(), TrackerConfig())
    dt, dr = pose_distance(r.pose, truth)
    assert dt < 1e-4 and dr < 1e-4 and r.converged


def test_cost_at_truth_and_recovered_cost():
    g = estimate_covariances(PointCloud(scene_cloud(5)), 10)
    truth = Pose(so3_exp([0.02, -0.05, 0.04]), [0.03, -0.06, 0.01])
    tgt = g.transformed(truth)
    idx = SpatialIndex(tgt)
    corr = find_correspondences(g, idx, truth, 0.5)
    at_truth = gicp_cost(g, tgt, corr, truth)
    assert at_truth < 1e-10
    r = optimize_pose(g, tgt, Pose(), TrackerConfig())
    assert r.final_cost <= at_truth + 1e-9


def test_accepted_steps_never_increase_cost():
    g = estimate_covariances(PointCloud(scene_cloud(6)), 10)
    truth = Pose(so3_exp([0.05, 0.1, -0.08]), [0.08, -0.05, 0.06])
    r = optimize_pose(g, g.transformed(truth), Pose(), TrackerConfig())
    assert r.cost_history
    for before, after in r.cost_history:
        assert after <= before


def test_se3_equivariance():
    rng = np.random.default_rng(7)
    g = estimate_covariances(PointCloud(scene_cloud(7)), 10)
    truth = Pose(so3_exp([0.03, -0.02, 0.05]), [0.04, 0.03, -0.02])
    base = optimize_pose(g, g.transformed(truth), Pose(), TrackerConfig()).pose
    w = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    src_w = g.transformed(w)
    tgt_w = g.transformed(truth).transformed(w)
    guess = w @ w.inverse()
    moved = optimize_pose(src_w, tgt_w, guess, TrackerConfig()).pose
    expected = w @ base @ w.inverse()
    dt, dr = pose_distance(moved, expected)
    assert dt < 1e-6 and dr < 1e-6


def test_determinism():
    g = estimate_covariances(PointCloud(scene_cloud(8)), 10)
    truth = Pose(so3_exp([0.0, 0.0, 0.1]), [0.05, 0.0, 0.0])
    a = optimize_pose(g, g.transformed(truth), Pose(), TrackerConfig())
    b = optimize_pose(g, g.transformed(truth), Pose(), TrackerConfig())
    np.testing.assert_array_equal(a.pose.as_matrix(), b.pose.as_matrix())
    assert (a.final_cost, a.iterations, a.inlier_count) == (b.final_cost, b.iterations, b.inlier_count)


def test_large_offset_needs_a_good_guess():
    rng = np.random.default_rng(11)
    truth = random_large_offset(rng)
    src, tgt = corridor_pair(rng, truth)
    cold = optimize_pose(src, tgt, Pose(), TrackerConfig())
    assert not cold.converged or pose_distance(cold.pose, truth)[0] > 0.1
    warm = optimize_pose(src, tgt, perturb(truth, rng), TrackerConfig())
    assert warm.converged and pose_distance(warm.pose, truth)[0] < 1e-3


def test_track_frame_bootstrap_and_static():
    g = prepare_frame(PointCloud(scene_cloud(9)), TrackerConfig())
    ref = ReferenceMap()
    first = track_frame(g, ref, Pose(), TrackerConfig())
    assert first.converged and len(ref) > 0
    np.testing.assert_array_equal(first.pose.as_matrix(), np.eye(4))
    second = track_frame(g, ref, Pose(), TrackerConfig())
    assert pose_distance(second.pose, Pose())[0] < 1e-6
    with pytest.raises(EmptyFrameError):
        track_frame(GaussianCloud(PointCloud(np.zeros((0, 3))), np.zeros((0, 3, 3))), ref, Pose())


def test_track_frame_fast_motion_guess_matters():
    rng = np.random.default_rng(12)
    truth = random_large_offset(rng, 0.4, 0.45)
    src, tgt = corridor_pair(rng, truth)
    ref = ReferenceMap()
    ref.extend(tgt, Pose())
    good = track_frame(src, ref, perturb(truth, rng), TrackerConfig())
    bad = track_frame(src, ref, Pose(), TrackerConfig())
    assert pose_distance(good.pose, truth)[0] < 0.01
    assert pose_distance(bad.pose, truth)[0] > 0.05


def test_track_frame_degenerate_falls_back_to_guess():
    line = np.c_[np.linspace(0, 1, 30), np.zeros(30), np.zeros(30)]
    g = estimate_covariances(PointCloud(line), 10)
    ref = ReferenceMap()
    ref.extend(g, Pose())
    guess = Pose(translation=[50.0, 0, 0])
    r = track_frame(g, ref, guess, TrackerConfig())
    assert not r.converged
    np.testing.assert_array_equal(r.pose.as_matrix(), guess.as_matrix())


def test_reference_map_modes():
    g = estimate_covariances(PointCloud(scene_cloud(10, 600)), 10)
    ref = ReferenceMap(0.05, "map")
    n1 = ref.extend(g, Pose())
    assert ref.extend(g, Pose()) == 0 and len(ref) == n1
    ref.extend(g, Pose(translation=[5.0, 0, 0]))
    assert len(ref) > 1.9 * n1 and ref.cloud.points[:, 0].max() > 5.0
    kf = ReferenceMap(0.05, "keyframe")
    kf.extend(g, Pose())
    kf.extend(g, Pose(translation=[5.0, 0, 0]))
    assert len(kf) < 1.1 * n1
    assert kf.cloud.points[:, 0].min() > 3.0


def test_prepare_frame_downsamples():
    pts = np.c_[np.random.default_rng(0).uniform(0, 1, (3000, 2)), np.ones(3000)]
    g = prepare_frame(PointCloud(pts), TrackerConfig(voxel_downsample=0.1))
    assert len(g) <= 100


def test_estimator_api():
    pts = scene_cloud(13, 800)
    truth = Pose(so3_exp([0, 0, 0.05]), [0.03, 0.01, 0.0])
    est = GICPTracker()
    assert est.get_params()["knn_k"] == 10
    est.fit(pts, truth.transform_points(pts))
    assert pose_distance(est.pose_, truth)[0] < 1e-6
    np.testing.assert_allclose(est.transform(pts), truth.transform_points(pts), atol=1e-6)
    assert est.score(pts, truth.transform_points(pts)) > -1e-9


def test_small_offset_batch():
    rng = np.random.default_rng(14)
    for _ in range(5):
        truth = random_small_offset(rng)
        src, tgt = corridor_pair(rng, truth)
        r = optimize_pose(src, tgt, Pose(), TrackerConfig())
        dt, dr = pose_distance(r.pose, truth)
        assert dt < 1e-4 and dr < 1e-4
