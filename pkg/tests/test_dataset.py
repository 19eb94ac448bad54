import math

import numpy as np
import pytest

from vigs.camera import CameraIntrinsics
from vigs.dataset import (Calibration, SyntheticSceneSpec, frame_window, load_sequence,
                          read_imu_csv, render_frame, synthesize_sequence, synthetic_imu)
from vigs.errors import (CoverageError, InvalidArgumentError, InvalidSpecError, MissingAssetError,
                         OrderingError)
from vigs.imu import Extrinsics, ImuBias, NavState, preintegrate, propagate_state
from vigs.se3 import Pose

ROOM = [{"min": [-3, -3, -1], "max": [3, 3, 2], "inside": True},
        {"min": [1.0, -0.5, -1], "max": [1.6, 0.5, 0.2], "colors": [[0.9, 0.2, 0.1], [0.1, 0.3, 0.8]]}]


def small_spec(**kw):
    base = dict(frame_count=4, frame_rate=10.0, imu_rate=200.0, width=32, height=24, fx=30.0, fy=30.0,
                boxes=ROOM)
    base.update(kw)
    return SyntheticSceneSpec(**base)


def circle_trajectory(radius=2.0, period=10.0):
    f = 1.0 / period
    return {"sine": [[radius, f, math.pi / 2], [radius, f, 0.0], [0.0, 0.0, 0.0]],
            "cubic": [[-radius, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]}


def test_stationary_imu_reads_gravity_reaction():
    imu = synthetic_imu(small_spec(), noisy=False)
    for s in imu:
        np.testing.assert_allclose(s.accel, [0, 0, 9.81], atol=1e-12)
        np.testing.assert_allclose(s.gyro, 0, atol=1e-15)


def test_constant_velocity_imu_matches_stationary():
    spec = small_spec(trajectory={"cubic": [[0, 1.5, 0, 0], [0, -0.3, 0, 0], [0, 0.2, 0, 0]]})
    for s in synthetic_imu(spec, noisy=False):
        np.testing.assert_allclose(s.accel, [0, 0, 9.81], atol=1e-12)


def test_circular_orbit_centripetal_component():
    spec = small_spec(trajectory=circle_trajectory())
    expected = 4 * math.pi ** 2 * 2.0 / 100.0
    assert expected == pytest.approx(0.79, abs=0.01)
    for s in synthetic_imu(spec, noisy=False):
        horizontal = np.linalg.norm(s.accel[:2])
        assert horizontal == pytest.approx(expected, abs=1e-12)
        assert s.accel[2] == pytest.approx(9.81, abs=1e-12)


def test_noise_and_bias_are_applied():
    spec = small_spec(noise={"accel_bias": [0.1, 0, 0], "gyro_bias": [0, 0, 0.01], "seed": 1})
    s = synthetic_imu(spec)[0]
    np.testing.assert_allclose(s.accel, [0.1, 0, 9.81], atol=1e-12)
    np.testing.assert_allclose(s.gyro, [0, 0, 0.01], atol=1e-12)


def test_spec_validation():
    with pytest.raises(InvalidSpecError):
        small_spec(imu_rate=50.0)
    with pytest.raises(InvalidSpecError):
        small_spec(trajectory={"sine": [[1, float("nan"), 0], [0, 0, 0], [0, 0, 0]]})
    with pytest.raises(InvalidSpecError):
        small_spec(trajectory={"ramp_time": 0.0})
    with pytest.raises(InvalidSpecError):
        small_spec(boxes=[{"min": [0, 0, 0], "max": [1, 0, 1]}])
    with pytest.raises(InvalidSpecError):
        SyntheticSceneSpec.from_dict({"frame_count": 3, "bogus": 1})
    with pytest.raises(InvalidSpecError):
        small_spec(dropped_frames=[0])


def test_render_frame_depth_is_z_depth():
    spec = small_spec(boxes=[{"min": [-5, -5, 3], "max": [5, 5, 4]}], imu_to_camera=[0, 0, 0, 0, 0, 0, 1])
    color, depth = render_frame(spec, Pose())
    np.testing.assert_allclose(depth, 3.0, atol=1e-12)
    assert color.shape == (24, 32, 3) and color.min() >= 0 and color.max() <= 1


def test_roundtrip_exact_timestamps_and_depth(tmp_path):
    spec = small_spec(trajectory={"cubic": [[0, 0.3, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]})
    m = synthesize_sequence(spec, tmp_path / "seq")
    np.testing.assert_array_equal(m.timestamps, spec.frame_times())
    again = load_sequence(tmp_path / "seq")
    np.testing.assert_array_equal(again.timestamps, spec.frame_times())
    assert len(again.imu) >= 10 * len(again)
    for k, t in enumerate(spec.frame_times()):
        _, truth = render_frame(spec, spec.camera_pose(t))
        assert np.max(np.abs(again.load_depth(k) - truth)) <= 0.5e-3 + 1e-12
    gt = again.groundtruth
    assert gt is not None and len(gt) == len(again)
    np.testing.assert_allclose(gt.poses[2].translation, spec.camera_pose(spec.frame_times()[2]).translation,
                               atol=1e-6)


def test_missing_imu_is_named(tmp_path):
    synthesize_sequence(small_spec(), tmp_path / "seq")
    (tmp_path / "seq" / "imu.csv").unlink()
    with pytest.raises(MissingAssetError) as info:
        load_sequence(tmp_path / "seq")
    assert any(p.endswith("imu.csv") for p in info.value.missing)
    assert "imu.csv" in str(info.value)


def test_shuffled_imu_rows_rejected(tmp_path):
    synthesize_sequence(small_spec(), tmp_path / "seq")
    path = tmp_path / "seq" / "imu.csv"
    header, *rows = path.read_text().splitlines()
    rng = np.random.default_rng(0)
    rng.shuffle(rows)
    path.write_text("\n".join([header] + rows) + "\n")
    with pytest.raises(OrderingError):
        load_sequence(tmp_path / "seq")


def test_imu_that_stops_early_is_a_coverage_error(tmp_path):
    synthesize_sequence(small_spec(), tmp_path / "seq")
    path = tmp_path / "seq" / "imu.csv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-30]) + "\n")
    with pytest.raises(CoverageError):
        load_sequence(tmp_path / "seq")


def test_imu_header_checked(tmp_path):
    p = tmp_path / "imu.csv"
    p.write_text("t,a,b\n1,2,3\n")
    with pytest.raises(InvalidArgumentError):
        read_imu_csv(p)


def test_frame_window_rate_arithmetic(tmp_path):
    spec = small_spec(frame_rate=30.0, imu_rate=300.0, frame_count=3)
    m = synthesize_sequence(spec, tmp_path / "seq")
    rec, win = frame_window(m, 1)
    assert 10 <= len(win) <= 11
    assert win[0].timestamp == m.frames[0].timestamp
    assert win[-1].timestamp == rec.timestamp == m.frames[1].timestamp
    with pytest.raises(InvalidArgumentError):
        frame_window(m, 0)
    with pytest.raises(InvalidArgumentError):
        frame_window(m, len(m))


def test_dropped_frames_leave_gaps():
    spec = small_spec(frame_count=6, dropped_frames=[2, 3])
    np.testing.assert_allclose(spec.frame_times(), [1.0, 1.1, 1.4, 1.5])


def test_double_integration_reproduces_ground_truth():
    """Dead-reckoning the noise-free stream over 10 s stays within 1 cm."""
    spec = small_spec(frame_count=101, trajectory={
        "cubic": [[0, 0.2, 0.01, 0], [0, 0, -0.02, 0.001], [0, 0, 0, 0]],
        "sine": [[0.3, 0.15, 0.0], [0.2, 0.1, 1.0], [0.05, 0.2, 0.0]],
        "rotation_axis": [0.2, -0.1, 1.0], "rotation_rate": 0.2})
    imu = synthetic_imu(spec, noisy=False)
    tr = spec.trajectory
    times = spec.frame_times()
    state = NavState(tr.position(0.0)[0], tr.velocity(0.0)[0], tr.rotation(0.0), times[0])
    worst = 0.0
    for a, b in zip(times[:-1], times[1:]):
        state = propagate_state(preintegrate(imu, a, b), state)
        worst = max(worst, np.linalg.norm(state.position - tr.position(b - spec.start_time)[0]))
    assert times[-1] - times[0] == pytest.approx(10.0)
    assert worst < 1e-2


def test_calibration_text_roundtrip():
    calib = Calibration(CameraIntrinsics(100.5, 101.0, 63.5, 47.25, 128, 96),
                        Extrinsics(Pose.from_tum([0.1, -0.02, 0.03, 0.5, -0.5, 0.5, 0.5])),
                        ImuBias([0.01, 0.02, -0.03], [0.001, 0, 0]), depth_scale=0.5, time_offset=0.002)
    back = Calibration.from_text(calib.to_text())
    assert back.intrinsics == calib.intrinsics
    assert back.depth_scale == 0.5 and back.time_offset == 0.002
    np.testing.assert_array_equal(back.bias.accel_bias, calib.bias.accel_bias)
    np.testing.assert_allclose(back.extrinsics.cam_from_imu.as_matrix(),
                               calib.extrinsics.cam_from_imu.as_matrix(), atol=1e-15)
    with pytest.raises(InvalidArgumentError):
        Calibration.from_text("fx = 1\nfy = 1\n")
    with pytest.raises(InvalidArgumentError):
        Calibration.from_text(calib.to_text() + "gravity = 1 2\n")


def test_time_offset_shifts_imu(tmp_path):
    m = synthesize_sequence(small_spec(), tmp_path / "seq")
    calib_path = tmp_path / "seq" / "calib.txt"
    calib_path.write_text(calib_path.read_text().replace("time_offset = 0.0", "time_offset = 0.01"))
    shifted = load_sequence(tmp_path / "seq")
    assert shifted.imu[0].timestamp == pytest.approx(m.imu[0].timestamp + 0.01, abs=1e-12)


def test_bundled_specs_parse():
    from vigs.cli import builtin_spec
    for name in ("fast_corridor", "slow_desk"):
        spec = SyntheticSceneSpec.from_json(builtin_spec(name))
        assert spec.imu_rate >= 10 * spec.frame_rate
    with pytest.raises(MissingAssetError):
        SyntheticSceneSpec.from_json("/nonexistent/spec.json")
