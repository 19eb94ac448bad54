"""IMU preintegration between RGB-D frames.

Sign convention: the accelerometer reports specific force, so a level sensor at
rest reads ``(0, 0, +9.81)``. ``GravityModel.gravity_world`` holds that same
reaction vector, ``(0, 0, +9.81)``, and world-frame acceleration is recovered as
``a_world = R_wb @ f - gravity_world``.

Frames: ``NavState.rotation`` is body-to-world (``R_wb``). All poses returned
here follow :mod:`vigs.se3` (``T_ab`` maps frame ``b`` into frame ``a``); the
relative IMU pose between frames ``k-1`` and ``k`` is ``T_{b(k-1), b(k)}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import CoverageError, GapError, InvalidArgumentError, OrderingError
from .se3 import Pose, Rotation, _as_vec3, so3_exp

MAX_SAMPLE_GAP = 0.1
COVERAGE_SLACK = 0.05
MAX_ACCEL = 200.0  # m/s^2
MAX_GYRO = 50.0  # rad/s
# Noise terms only ever enter point estimates as zero.
ACCEL_NOISE = np.zeros(3)
GYRO_NOISE = np.zeros(3)


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.timestamp):
            raise InvalidArgumentError("IMU timestamp must be finite")
        accel, gyro = _as_vec3(self.accel, "accel"), _as_vec3(self.gyro, "gyro")
        if np.linalg.norm(accel) > MAX_ACCEL or np.linalg.norm(gyro) > MAX_GYRO:
            raise InvalidArgumentError(f"IMU sample at t={self.timestamp} exceeds sanity bounds")
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "gyro", gyro)


@dataclass(frozen=True)
class ImuBias:
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        ba = _as_vec3(self.accel_bias, "accel_bias")
        bg = _as_vec3(self.gyro_bias, "gyro_bias")
        if np.linalg.norm(ba) > 1.0 or np.linalg.norm(bg) > 0.1:
            raise InvalidArgumentError("IMU bias outside sanity bounds (1 m/s^2, 0.1 rad/s)")
        object.__setattr__(self, "accel_bias", ba)
        object.__setattr__(self, "gyro_bias", bg)


@dataclass(frozen=True)
class GravityModel:
    gravity_world: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 9.81]))
    allow_nonstandard: bool = False

    def __post_init__(self):
        g = _as_vec3(self.gravity_world, "gravity_world")
        if not self.allow_nonstandard and not 9.78 <= np.linalg.norm(g) <= 9.84:
            raise InvalidArgumentError(f"|gravity| = {np.linalg.norm(g):.4f} outside [9.78, 9.84]")
        object.__setattr__(self, "gravity_world", g)


@dataclass(frozen=True)
class NavState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: Rotation = field(default_factory=Rotation.identity)
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", _as_vec3(self.position, "position"))
        object.__setattr__(self, "velocity", _as_vec3(self.velocity, "velocity"))

    @property
    def pose(self) -> Pose:
        return Pose(self.rotation, self.position)


@dataclass(frozen=True)
class PreintegrationDelta:
    """Position/velocity/rotation increments in the start frame's body axes.

    Gravity is *not* removed; it is applied in :func:`predict_relative_pose`.
    """

    alpha: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gamma: Rotation = field(default_factory=Rotation.identity)
    duration: float = 0.0
    sample_count: int = 0

    @classmethod
    def identity(cls) -> "PreintegrationDelta":
        return cls()

    def compose(self, other: "PreintegrationDelta") -> "PreintegrationDelta":
        """Delta over ``[a, c]`` from deltas over ``[a, b]`` (self) and ``[b, c]``."""
        return PreintegrationDelta(
            alpha=self.alpha + self.beta * other.duration + self.gamma.apply(other.alpha),
            beta=self.beta + self.gamma.apply(other.beta),
            gamma=self.gamma @ other.gamma,
            duration=self.duration + other.duration,
            sample_count=self.sample_count + other.sample_count,
        )


@dataclass(frozen=True)
class Extrinsics:
    """Rigid camera/IMU mounting. ``cam_from_imu`` maps IMU coordinates to camera."""

    cam_from_imu: Pose = field(default_factory=Pose.identity)

    @property
    def imu_from_cam(self) -> Pose:
        return self.cam_from_imu.inverse()


def correct_sample(s: ImuSample, bias: ImuBias):
    """Bias-corrected ``(accel, gyro)``. Gravity stays in the accel reading."""
    return (s.accel - bias.accel_bias - ACCEL_NOISE,
            s.gyro - bias.gyro_bias - GYRO_NOISE)


def integrate_sample(delta: PreintegrationDelta, s_prev: ImuSample, s_curr: ImuSample,
                     bias: ImuBias) -> PreintegrationDelta:
    """Advance ``delta`` across one sample interval with the midpoint rule."""
    dt = s_curr.timestamp - s_prev.timestamp
    if dt <= 0:
        raise OrderingError(f"IMU timestamps not increasing: {s_prev.timestamp} -> {s_curr.timestamp}")
    if dt > MAX_SAMPLE_GAP:
        raise GapError(f"IMU gap of {dt:.4f} s exceeds {MAX_SAMPLE_GAP} s")
    a0, w0 = correct_sample(s_prev, bias)
    a1, w1 = correct_sample(s_curr, bias)
    w = 0.5 * (w0 + w1)
    gamma_mid = delta.gamma @ so3_exp(0.5 * w * dt)
    acc = gamma_mid.apply(0.5 * (a0 + a1))
    return PreintegrationDelta(
        alpha=delta.alpha + delta.beta * dt + 0.5 * acc * dt * dt,
        beta=delta.beta + acc * dt,
        gamma=delta.gamma @ so3_exp(w * dt),
        duration=delta.duration + dt,
        sample_count=delta.sample_count + 1,
    )


def interpolate_sample(a: ImuSample, b: ImuSample, t: float) -> ImuSample:
    if b.timestamp == a.timestamp:
        return replace(a, timestamp=t)
    u = (t - a.timestamp) / (b.timestamp - a.timestamp)
    return ImuSample(t, (1 - u) * a.accel + u * b.accel, (1 - u) * a.gyro + u * b.gyro)


def check_monotonic(samples) -> None:
    for i in range(1, len(samples)):
        if not samples[i].timestamp > samples[i - 1].timestamp:
            raise OrderingError(f"IMU sample {i} at t={samples[i].timestamp} is not after "
                                f"t={samples[i - 1].timestamp}")


def window_samples(samples, t_start: float, t_end: float):
    """Samples strictly inside ``(t_start, t_end)`` with linearly interpolated
    (or clamped, within the coverage slack) samples exactly at both ends."""
    if not samples:
        raise CoverageError("empty IMU stream")
    if samples[0].timestamp > t_start + COVERAGE_SLACK or samples[-1].timestamp < t_end - COVERAGE_SLACK:
        raise CoverageError(
            f"IMU stream [{samples[0].timestamp:.6f}, {samples[-1].timestamp:.6f}] does not cover "
            f"[{t_start:.6f}, {t_end:.6f}]")
    times = np.fromiter((s.timestamp for s in samples), float, len(samples))

    def at(t):
        i = int(np.searchsorted(times, t))
        if i < len(samples) and times[i] == t:
            return samples[i]
        if i == 0:
            return replace(samples[0], timestamp=t)
        if i == len(samples):
            return replace(samples[-1], timestamp=t)
        return interpolate_sample(samples[i - 1], samples[i], t)

    lo = int(np.searchsorted(times, t_start, side="right"))
    hi = int(np.searchsorted(times, t_end, side="left"))
    return [at(t_start)] + list(samples[lo:hi]) + [at(t_end)]


def preintegrate(samples, t_start: float, t_end: float, bias: ImuBias | None = None) -> PreintegrationDelta:
    """Preintegrate an ordered sample list over exactly ``[t_start, t_end]``."""
    bias = bias or ImuBias()
    if t_end == t_start:
        return PreintegrationDelta.identity()
    if t_end < t_start:
        raise InvalidArgumentError(f"t_end {t_end} precedes t_start {t_start}")
    check_monotonic(samples)
    win = window_samples(samples, t_start, t_end)
    delta = PreintegrationDelta.identity()
    for prev, curr in zip(win[:-1], win[1:]):
        delta = integrate_sample(delta, prev, curr, bias)
    return delta


def predict_relative_pose(delta: PreintegrationDelta, state: NavState,
                          gravity: GravityModel | None = None) -> Pose:
    """Body motion over the delta's interval as ``T_{b(k-1), b(k)}``."""
    g = (gravity or GravityModel()).gravity_world
    dt = delta.duration
    r_wb = state.rotation
    world_disp = state.velocity * dt - 0.5 * g * dt * dt
    return Pose(delta.gamma, r_wb.inv().apply(world_disp) + delta.alpha)


def propagate_state(delta: PreintegrationDelta, state: NavState,
                    gravity: GravityModel | None = None) -> NavState:
    """Dead-reckon the nav state across the delta (no tracking feedback)."""
    g = (gravity or GravityModel()).gravity_world
    dt = delta.duration
    rel = predict_relative_pose(delta, state, gravity)
    return NavState(
        position=state.position + state.rotation.apply(rel.translation),
        velocity=state.velocity - g * dt + state.rotation.apply(delta.beta),
        rotation=state.rotation @ delta.gamma,
        timestamp=state.timestamp + dt,
    )


def initial_guess_camera(rel_imu: Pose, prev_cam_pose: Pose, ext: Extrinsics,
                         full_similarity: bool = True) -> Pose:
    """Camera pose guess for frame ``k`` from the IMU relative motion.

    ``prev_cam_pose`` is world-from-camera. The relative camera motion is
    ``cam_from_imu @ rel_imu @ imu_from_cam``; with ``full_similarity=False``
    the trailing ``imu_from_cam`` factor is dropped.
    """
    rel_cam = ext.cam_from_imu @ rel_imu
    if full_similarity:
        rel_cam = rel_cam @ ext.imu_from_cam
    return prev_cam_pose @ rel_cam


def imu_pose_from_camera(cam_pose: Pose, ext: Extrinsics, full_similarity: bool = True) -> Pose:
    """IMU pose in the IMU world frame from a tracked camera pose."""
    out = ext.imu_from_cam @ cam_pose
    if full_similarity:
        out = out @ ext.cam_from_imu
    return out


def update_from_tracking(tracked_cam_pose_prev: Pose, tracked_cam_pose_curr: Pose,
                         ext: Extrinsics, frame_dt: float, *, timestamp: float = 0.0,
                         full_similarity: bool = True) -> NavState:
    """Reset the nav state from two consecutive tracked camera poses."""
    if not frame_dt > 0:
        raise InvalidArgumentError(f"frame_dt must be positive, got {frame_dt}")
    prev = imu_pose_from_camera(tracked_cam_pose_prev, ext, full_similarity)
    curr = imu_pose_from_camera(tracked_cam_pose_curr, ext, full_similarity)
    return NavState(
        position=curr.translation,
        velocity=(curr.translation - prev.translation) / frame_dt,
        rotation=curr.rotation,
        timestamp=timestamp,
    )


def samples_from_array(arr) -> list[ImuSample]:
    """Rows of ``timestamp, ax, ay, az, gx, gy, gz``."""
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 7:
        raise InvalidArgumentError(f"IMU array must have shape (N, 7), got {arr.shape}")
    return [ImuSample(float(r[0]), r[1:4], r[4:7]) for r in arr]


class ImuPreintegrator(BaseEstimator):
    """Estimator wrapper: ``fit`` ingests an IMU stream, ``predict`` returns the
    IMU-frame relative pose for each consecutive pair of frame times.

    Parameters
    ----------
    gravity : array-like of 3, default (0, 0, 9.81)
    accel_bias, gyro_bias : array-like of 3, default zeros
    time_offset : float, default 0.0
        Added to IMU timestamps to bring them onto the camera clock.
    """

    def __init__(self, gravity=(0.0, 0.0, 9.81), accel_bias=(0.0, 0.0, 0.0),
                 gyro_bias=(0.0, 0.0, 0.0), time_offset=0.0):
        self.gravity = gravity
        self.accel_bias = accel_bias
        self.gyro_bias = gyro_bias
        self.time_offset = time_offset

    def fit(self, X, y=None):
        arr = np.array(X, dtype=float)
        arr[:, 0] += self.time_offset
        self.samples_ = samples_from_array(arr)
        check_monotonic(self.samples_)
        self.bias_ = ImuBias(self.accel_bias, self.gyro_bias)
        self.gravity_ = GravityModel(self.gravity, allow_nonstandard=True)
        return self

    def deltas(self, frame_times):
        check_is_fitted(self, "samples_")
        t = np.asarray(frame_times, dtype=float)
        return [preintegrate(self.samples_, a, b, self.bias_) for a, b in zip(t[:-1], t[1:])]

    def predict(self, frame_times, initial_state: NavState | None = None):
        """Dead-reckoned relative poses (no tracking resets) between frames."""
        state = initial_state or NavState()
        out = []
        for d in self.deltas(frame_times):
            out.append(predict_relative_pose(d, state, self.gravity_))
            state = propagate_state(d, state, self.gravity_)
        return out
