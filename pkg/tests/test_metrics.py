import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import ssim_direct
from vigs.errors import InsufficientOverlapError, InvalidArgumentError, OrderingError
from vigs.metrics import MetricsReport, Trajectory, associate, ate_rmse, psnr, ssim
from vigs.se3 import Pose, Rotation, so3_exp


def wiggly_trajectory(n=30, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * 0.1
    poses = [Pose(so3_exp(rng.normal(size=3) * 0.1), [math.cos(x), math.sin(2 * x), 0.3 * x])
             for x in t]
    return Trajectory(t, poses)


def rigidly_moved(traj, w):
    return Trajectory(traj.timestamps, [w @ p for p in traj.poses])


def test_ate_identical_is_zero():
    tr = wiggly_trajectory()
    rmse, align = ate_rmse(tr, tr)
    assert rmse == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(align.as_matrix(), np.eye(4), atol=1e-9)


def test_ate_alignment_invariance():
    tr = wiggly_trajectory()
    rng = np.random.default_rng(1)
    for _ in range(100):
        w = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 5)
        rmse, _ = ate_rmse(rigidly_moved(tr, w), tr, align=True)
        assert rmse < 1e-9


def test_ate_single_outlier_without_alignment():
    t = np.arange(10) * 0.1
    ref = Trajectory(t, [Pose(Rotation.identity(), [x, 0, 0]) for x in range(10)])
    est_poses = list(ref.poses)
    est_poses[4] = Pose(Rotation.identity(), [4, 0.1, 0])
    rmse, _ = ate_rmse(Trajectory(t, est_poses), ref, align=False)
    assert rmse == pytest.approx(0.1 / math.sqrt(10), abs=1e-9)


def test_ate_requires_overlap():
    tr = wiggly_trajectory(10)
    shifted = Trajectory(tr.timestamps + 5.0, tr.poses)
    with pytest.raises(InsufficientOverlapError):
        ate_rmse(shifted, tr)


def test_association_window():
    ref = wiggly_trajectory(10)
    est = Trajectory(ref.timestamps + 0.015, ref.poses)
    ie, ir = associate(est, ref)
    np.testing.assert_array_equal(ie, ir)
    assert len(ie) == 10
    late = Trajectory(ref.timestamps + 0.025, ref.poses)
    assert len(associate(late, ref)[0]) == 0


def test_trajectory_tum_roundtrip(tmp_path):
    tr = wiggly_trajectory()
    tr.save_tum(tmp_path / "t.txt")
    line = (tmp_path / "t.txt").read_text().splitlines()[0].split()
    assert len(line) == 8 and all(len(v.split(".")[1]) == 6 for v in line)
    back = Trajectory.load_tum(tmp_path / "t.txt")
    np.testing.assert_allclose(back.positions, tr.positions, atol=1e-6)
    with pytest.raises(OrderingError):
        Trajectory([1.0, 0.5], [Pose(), Pose()])


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    b = np.clip(a + 0.05, 0, 1)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(InvalidArgumentError):
        psnr(a, a[:4])


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.2, 0.8, (16, 16))
    noise = rng.uniform(-1, 1, a.shape)
    values = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_ssim_examples():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, (20, 24, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(np.full((16, 16), 0.5), np.full((16, 16), 0.5)) == pytest.approx(1.0, abs=1e-12)
    board = (np.indices((24, 24)).sum(axis=0) % 2).astype(float)
    assert ssim(board, 1 - board) == pytest.approx(ssim_direct(board, 1 - board), abs=1e-9)
    with pytest.raises(InvalidArgumentError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


def test_ssim_matches_direct_oracle_on_random_images():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0, 1, (14, 15, 2)), rng.uniform(0, 1, (14, 15, 2))
    assert ssim(a, b) == pytest.approx(ssim_direct(a, b), abs=1e-9)


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(0, 1, (12, 13)), rng.uniform(0, 1, (12, 13))
    _, grad = ssim(a, b, return_grad=True)
    h = 1e-6
    for idx in [(0, 0), (5, 6), (11, 12), (3, 9)]:
        p, m = a.copy(), a.copy()
        p[idx] += h
        m[idx] -= h
        fd = (ssim(p, b) - ssim(m, b)) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_self_similarity(seed):
    a = np.random.default_rng(seed).uniform(0, 1, (11, 11))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_metrics_report_lines(tmp_path):
    rep = MetricsReport(ate_rmse=0.0123, psnr=[20.0, 22.0], ssim=[0.8, 0.9], frame_count=5,
                        extra={"keyframes": 2})
    rep.write(tmp_path / "m.txt")
    lines = (tmp_path / "m.txt").read_text().splitlines()
    assert "ate_rmse=0.012300" in lines and "psnr_mean=21.000000" in lines
    assert "keyframes=2" in lines and "frame_count=5" in lines
    assert all(line.count("=") == 1 for line in lines)
