"""RGB-D + IMU sequences on disk, and an analytic synthetic sequence generator.

Directory layout::

    rgb/<timestamp>.png      8-bit RGB
    depth/<timestamp>.png    16-bit, millimeters
    imu.csv                  header ``timestamp,ax,ay,az,gx,gy,gz`` (SI units)
    calib.txt                ``key = value`` lines
    groundtruth.txt          optional, TUM format (world-from-camera)
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics
from .errors import (CoverageError, InvalidArgumentError, InvalidSpecError, MissingAssetError,
                     OrderingError)
from .imu import COVERAGE_SLACK, Extrinsics, ImuBias, ImuSample, window_samples
from .metrics import Trajectory
from .se3 import Pose, Rotation, so3_exp

log = logging.getLogger(__name__)

IMU_HEADER = "timestamp,ax,ay,az,gx,gy,gz"
ASSOCIATION_TOLERANCE = 0.01
IMU_LEAD = 0.1
DEPTH_UNIT = 1000.0  # PNG counts per meter
TIME_DECIMALS = 6

# Forward-looking camera on a body frame with x forward, z up.
DEFAULT_CAM_FROM_IMU = [0.0, 0.0, 0.0, 0.5, -0.5, 0.5, 0.5]


@dataclass(frozen=True)
class FrameRecord:
    timestamp: float
    rgb_path: Path
    depth_path: Path


@dataclass(frozen=True)
class Calibration:
    intrinsics: CameraIntrinsics
    extrinsics: Extrinsics = field(default_factory=Extrinsics)
    bias: ImuBias = field(default_factory=ImuBias)
    depth_scale: float = 1.0
    time_offset: float = 0.0
    gravity: tuple = (0.0, 0.0, 9.81)

    def to_text(self) -> str:
        k = self.intrinsics
        lines = [f"fx = {k.fx!r}", f"fy = {k.fy!r}", f"cx = {k.cx!r}", f"cy = {k.cy!r}",
                 f"width = {k.width}", f"height = {k.height}",
                 f"depth_scale = {self.depth_scale!r}", f"time_offset = {self.time_offset!r}",
                 "imu_to_camera = " + " ".join(repr(float(v)) for v in self.extrinsics.cam_from_imu.to_tum()),
                 "accel_bias = " + " ".join(repr(float(v)) for v in self.bias.accel_bias),
                 "gyro_bias = " + " ".join(repr(float(v)) for v in self.bias.gyro_bias),
                 "gravity = " + " ".join(repr(float(v)) for v in self.gravity)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source="calib.txt") -> "Calibration":
        kv = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgumentError(f"{source}:{n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            kv[key] = [float(v) for v in val.replace(",", " ").split()]

        def get(key, n=1, default=None):
            if key not in kv:
                if default is None:
                    raise InvalidArgumentError(f"{source}: missing key {key!r}")
                return default
            if len(kv[key]) != n:
                raise InvalidArgumentError(f"{source}: {key} needs {n} values, got {len(kv[key])}")
            return kv[key][0] if n == 1 else kv[key]

        intr = CameraIntrinsics(get("fx"), get("fy"), get("cx"), get("cy"),
                                int(get("width")), int(get("height")))
        ext = Extrinsics(Pose.from_tum(get("imu_to_camera", 7, [0, 0, 0, 0, 0, 0, 1])))
        bias = ImuBias(get("accel_bias", 3, [0, 0, 0]), get("gyro_bias", 3, [0, 0, 0]))
        return cls(intr, ext, bias, get("depth_scale", default=1.0), get("time_offset", default=0.0),
                   tuple(get("gravity", 3, [0.0, 0.0, 9.81])))


@dataclass
class SequenceManifest:
    root: Path
    frames: list
    imu: list
    calibration: Calibration
    groundtruth: Trajectory | None = None

    def __len__(self):
        return len(self.frames)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def load_rgb(self, k: int) -> np.ndarray:
        with Image.open(self.frames[k].rgb_path) as im:
            return np.asarray(im.convert("RGB"))

    def load_depth(self, k: int) -> np.ndarray:
        """Depth in meters; zero marks missing measurements."""
        with Image.open(self.frames[k].depth_path) as im:
            raw = np.asarray(im).astype(float)
        return raw / DEPTH_UNIT * self.calibration.depth_scale


def _timestamp_files(folder: Path) -> list[tuple[float, Path]]:
    out = []
    for p in folder.glob("*.png"):
        try:
            out.append((float(p.stem), p))
        except ValueError:
            log.warning("skipping %s: file name is not a timestamp", p)
    return sorted(out)


def read_imu_csv(path) -> list[ImuSample]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].replace(" ", "") != IMU_HEADER:
        raise InvalidArgumentError(f"{path}: header must be {IMU_HEADER!r}")
    rows = [line for line in lines[1:] if line.strip()]
    arr = np.array([[float(v) for v in r.split(",")] for r in rows]).reshape(-1, 7)
    bad = np.flatnonzero(np.diff(arr[:, 0]) <= 0)
    if len(bad):
        i = int(bad[0]) + 1
        raise OrderingError(f"{path}: row {i + 1} timestamp {arr[i, 0]} is not after {arr[i - 1, 0]}")
    return [ImuSample(float(r[0]), r[1:4], r[4:7]) for r in arr]


def write_imu_csv(path, samples) -> None:
    lines = [IMU_HEADER]
    for s in samples:
        lines.append(",".join([f"{s.timestamp:.{TIME_DECIMALS}f}"] + [repr(float(v)) for v in s.accel]
                              + [repr(float(v)) for v in s.gyro]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_sequence(root) -> SequenceManifest:
    root = Path(root)
    required = [root / "rgb", root / "depth", root / "imu.csv", root / "calib.txt"]
    missing = [str(p) for p in required if not p.exists()]
    if missing:
        raise MissingAssetError(missing)
    calib = Calibration.from_text((root / "calib.txt").read_text(), str(root / "calib.txt"))
    rgb = _timestamp_files(root / "rgb")
    depth = _timestamp_files(root / "depth")
    if not rgb or not depth:
        raise MissingAssetError([str(root / d) + "/*.png" for d, f in (("rgb", rgb), ("depth", depth)) if not f])
    dts = np.array([t for t, _ in depth])
    frames = []
    for t, p in rgb:
        j = int(np.argmin(np.abs(dts - t)))
        if abs(dts[j] - t) <= ASSOCIATION_TOLERANCE:
            frames.append(FrameRecord(t, p, depth[j][1]))
        else:
            log.warning("no depth image within %.0f ms of rgb %s", ASSOCIATION_TOLERANCE * 1e3, p.name)
    if not frames:
        raise MissingAssetError([str(root / "depth") + "/<matching timestamps>"])

    imu = read_imu_csv(root / "imu.csv")
    if calib.time_offset:
        imu = [ImuSample(s.timestamp + calib.time_offset, s.accel, s.gyro) for s in imu]
    if not imu or imu[0].timestamp > frames[0].timestamp + COVERAGE_SLACK \
            or imu[-1].timestamp < frames[-1].timestamp - COVERAGE_SLACK:
        raise CoverageError(f"{root / 'imu.csv'} does not span the frame timestamps")

    gt = None
    if (root / "groundtruth.txt").exists():
        gt = Trajectory.load_tum(root / "groundtruth.txt")
    return SequenceManifest(root, frames, imu, calib, gt)


def frame_window(manifest: SequenceManifest, k: int):
    """Frame ``k`` and the IMU samples spanning ``[t_{k-1}, t_k]`` with
    interpolated samples exactly at both ends."""
    if not 1 <= k < len(manifest):
        raise InvalidArgumentError(f"frame index must be in [1, {len(manifest) - 1}], got {k}")
    t0, t1 = manifest.frames[k - 1].timestamp, manifest.frames[k].timestamp
    return manifest.frames[k], window_samples(manifest.imu, t0, t1)


def save_rgb_png(path, rgb) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.round(np.asarray(rgb, float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def save_depth_png(path, depth_m, depth_scale: float = 1.0) -> None:
    mm = np.round(np.nan_to_num(np.asarray(depth_m, float)) / depth_scale * DEPTH_UNIT)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


# ---------------------------------------------------------------- synthesis

@dataclass
class Box:
    """Axis-aligned box. With ``inside`` the camera is expected within it
    (rooms and corridors) and the far wall is what gets hit."""

    min: list
    max: list
    colors: list = field(default_factory=lambda: [[0.8, 0.8, 0.8], [0.2, 0.2, 0.2]])
    checker: float = 0.25
    inside: bool = False


@dataclass
class TrajectorySpec:
    """Position per axis: cubic polynomial + sinusoid + smooth ramp from rest.

    ``p(t) = c0 + c1 t + c2 t^2 + c3 t^3 + A sin(2 pi f t + phi) + ramp(t)``,
    ``t`` measured from the first frame. The ramp accelerates from zero to
    ``ramp_velocity`` over ``ramp_time`` seconds with a smoothstep velocity
    profile. Orientation is ``Exp(axis * rate * t)``.
    """

    cubic: list = field(default_factory=lambda: [[0.0] * 4 for _ in range(3)])
    sine: list = field(default_factory=lambda: [[0.0, 0.0, 0.0] for _ in range(3)])
    ramp_velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    ramp_time: float = 1.0
    rotation_axis: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    rotation_rate: float = 0.0

    def _arrays(self):
        c = np.asarray(self.cubic, float).reshape(3, 4)
        s = np.asarray(self.sine, float).reshape(3, 3)
        return c, s, np.asarray(self.ramp_velocity, float).reshape(3)

    def _ramp(self, t, order):
        v = np.asarray(self.ramp_velocity, float)
        big_t = self.ramp_time
        x = np.clip(t / big_t, 0.0, 1.0)[:, None]
        beyond = np.maximum(t - big_t, 0.0)[:, None]
        if order == 0:
            return v * (big_t * (x ** 3 - 0.5 * x ** 4) + beyond)
        if order == 1:
            return v * (3 * x ** 2 - 2 * x ** 3)
        return v / big_t * (6 * x - 6 * x ** 2)

    def position(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        c, s, _ = self._arrays()
        poly = c[:, 0] + np.outer(t, c[:, 1]) + np.outer(t ** 2, c[:, 2]) + np.outer(t ** 3, c[:, 3])
        sin = s[:, 0] * np.sin(2 * np.pi * np.outer(t, s[:, 1]) + s[:, 2])
        return poly + sin + self._ramp(t, 0)

    def velocity(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        c, s, _ = self._arrays()
        w = 2 * np.pi * s[:, 1]
        poly = c[:, 1] + 2 * np.outer(t, c[:, 2]) + 3 * np.outer(t ** 2, c[:, 3])
        return poly + s[:, 0] * w * np.cos(np.outer(t, w) + s[:, 2]) + self._ramp(t, 1)

    def acceleration(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        c, s, _ = self._arrays()
        w = 2 * np.pi * s[:, 1]
        poly = 2 * c[:, 2] + 6 * np.outer(t, c[:, 3])
        return poly - s[:, 0] * w ** 2 * np.sin(np.outer(t, w) + s[:, 2]) + self._ramp(t, 2)

    @property
    def angular_velocity(self) -> np.ndarray:
        axis = np.asarray(self.rotation_axis, float)
        return axis / np.linalg.norm(axis) * self.rotation_rate

    def rotation(self, t: float) -> Rotation:
        return so3_exp(self.angular_velocity * float(t))

    def pose(self, t: float) -> Pose:
        """World-from-body."""
        return Pose(self.rotation(t), self.position(t)[0])


@dataclass
class NoiseSpec:
    accel_sigma: float = 0.0
    gyro_sigma: float = 0.0
    accel_bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    gyro_bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    seed: int = 0


@dataclass
class SyntheticSceneSpec:
    frame_count: int = 30
    frame_rate: float = 10.0
    imu_rate: float = 200.0
    width: int = 160
    height: int = 120
    fx: float = 120.0
    fy: float = 120.0
    cx: float | None = None
    cy: float | None = None
    start_time: float = 1.0
    boxes: list = field(default_factory=list)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    imu_to_camera: list = field(default_factory=lambda: list(DEFAULT_CAM_FROM_IMU))
    gravity: list = field(default_factory=lambda: [0.0, 0.0, 9.81])
    dropped_frames: list = field(default_factory=list)
    name: str = "synthetic"

    def __post_init__(self):
        if isinstance(self.trajectory, dict):
            self.trajectory = TrajectorySpec(**self.trajectory)
        if isinstance(self.noise, dict):
            self.noise = NoiseSpec(**self.noise)
        self.boxes = [Box(**b) if isinstance(b, dict) else b for b in self.boxes]
        self.validate()

    def validate(self) -> None:
        try:
            tr = self.trajectory
            c, s, v = tr._arrays()
            nums = np.concatenate([c.ravel(), s.ravel(), v, [tr.ramp_time, tr.rotation_rate],
                                   np.asarray(tr.rotation_axis, float).reshape(3)])
        except (TypeError, ValueError) as exc:
            raise InvalidSpecError(f"malformed trajectory: {exc}") from exc
        if not np.all(np.isfinite(nums)):
            raise InvalidSpecError("trajectory parameters must be finite")
        if not tr.ramp_time > 0:
            raise InvalidSpecError("ramp_time must be positive")
        if np.any(s[:, 1] < 0):
            raise InvalidSpecError("sinusoid frequencies must be non-negative")
        if tr.rotation_rate and np.linalg.norm(tr.rotation_axis) < 1e-12:
            raise InvalidSpecError("rotation_axis must be non-zero")
        if self.frame_count < 1 or not self.frame_rate > 0:
            raise InvalidSpecError("frame_count and frame_rate must be positive")
        if any(not 0 < int(i) < self.frame_count - 1 for i in self.dropped_frames):
            raise InvalidSpecError("dropped_frames must be interior nominal frame indices")
        if self.imu_rate < 10 * self.frame_rate:
            raise InvalidSpecError("imu_rate must be at least 10x the frame rate")
        if self.width < 1 or self.height < 1 or not (self.fx > 0 and self.fy > 0):
            raise InvalidSpecError("invalid image size or focal length")
        for b in self.boxes:
            if np.any(np.asarray(b.max, float) <= np.asarray(b.min, float)):
                raise InvalidSpecError(f"box max must exceed min: {b}")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        cx = (self.width - 1) / 2.0 if self.cx is None else self.cx
        cy = (self.height - 1) / 2.0 if self.cy is None else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy, self.width, self.height)

    @property
    def extrinsics(self) -> Extrinsics:
        return Extrinsics(Pose.from_tum(self.imu_to_camera))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpecError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "SyntheticSceneSpec":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise MissingAssetError([str(path)]) from None
        except json.JSONDecodeError as exc:
            raise InvalidSpecError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def frame_times(self) -> np.ndarray:
        """Timestamps of the frames actually delivered (nominal grid minus drops)."""
        k = np.setdiff1d(np.arange(self.frame_count), np.asarray(self.dropped_frames, int))
        return np.round(self.start_time + k / self.frame_rate, TIME_DECIMALS)

    def imu_times(self) -> np.ndarray:
        t0 = self.start_time - IMU_LEAD
        t_end = self.frame_times()[-1]
        n = int(math.ceil((t_end - t0) * self.imu_rate - 1e-9)) + 1
        return np.round(t0 + np.arange(n) / self.imu_rate, TIME_DECIMALS)

    def camera_pose(self, t: float) -> Pose:
        """World-from-camera at absolute time ``t``."""
        return self.trajectory.pose(t - self.start_time) @ self.extrinsics.imu_from_cam


def ray_cast(boxes, origin, dirs):
    """Nearest hit of rays ``origin + s * dirs`` against the boxes.

    Returns ``(s, points, colors)``; misses have ``s = inf`` and black color.
    """
    dirs = np.asarray(dirs, float)
    n = len(dirs)
    best = np.full(n, np.inf)
    color = np.zeros((n, 3))
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    for box in boxes:
        lo, hi = np.asarray(box.min, float), np.asarray(box.max, float)
        t1 = (lo - origin) / safe
        t2 = (hi - origin) / safe
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        s = t_far if box.inside else t_near
        ok = (t_far >= t_near) & (s > 1e-9)
        if not box.inside:
            ok &= t_near > 1e-9
        hit = ok & (s < best)
        if not hit.any():
            continue
        best[hit] = s[hit]
        color[hit] = _checker_color(box, origin + s[hit, None] * dirs[hit])
    pts = origin + np.where(np.isfinite(best), best, 0.0)[:, None] * dirs
    return best, pts, color


def _checker_color(box: Box, pts: np.ndarray) -> np.ndarray:
    lo, hi = np.asarray(box.min, float), np.asarray(box.max, float)
    # the face is the axis whose boundary the point lies closest to
    dist = np.minimum(np.abs(pts - lo), np.abs(pts - hi))
    face_axis = np.argmin(dist, axis=1)
    cells = np.floor(pts / box.checker).astype(np.int64)
    cells[np.arange(len(pts)), face_axis] = 0
    parity = cells.sum(axis=1) % 2
    palette = np.asarray(box.colors, float).reshape(-1, 3)
    shade = palette[parity % len(palette)]
    # slight per-face tint so faces sharing a color stay distinguishable
    tint = np.array([1.0, 0.93, 0.86])[face_axis][:, None]
    return np.clip(shade * tint, 0.0, 1.0)


def render_frame(spec: SyntheticSceneSpec, world_from_cam: Pose):
    """Color in [0, 1] and z-depth (meters, 0 where nothing is hit)."""
    k = spec.intrinsics
    v, u = np.mgrid[0:k.height, 0:k.width]
    rays_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u, dtype=float)], -1)
    rays_cam = rays_cam.reshape(-1, 3)
    dirs = world_from_cam.rotation.apply(rays_cam)
    s, _, color = ray_cast(spec.boxes, world_from_cam.translation, dirs)
    # ray z-component is 1 in the camera frame, so s is the z-depth
    depth = np.where(np.isfinite(s), s, 0.0)
    return color.reshape(k.height, k.width, 3), depth.reshape(k.height, k.width)


def synthetic_imu(spec: SyntheticSceneSpec, times=None, *, noisy: bool = True) -> list[ImuSample]:
    """Specific force ``R^T (a + g)`` and body rate from the closed-form trajectory."""
    times = spec.imu_times() if times is None else np.asarray(times, float)
    tr = spec.trajectory
    tau = times - spec.start_time
    acc = tr.acceleration(tau)
    g = np.asarray(spec.gravity, float)
    omega = tr.angular_velocity
    rots = [tr.rotation(t).matrix for t in tau]
    f = np.einsum("nji,nj->ni", np.array(rots), acc + g)
    w = np.tile(omega, (len(times), 1))
    if noisy:
        nz = spec.noise
        rng = np.random.default_rng(nz.seed)
        f = f + np.asarray(nz.accel_bias, float) + nz.accel_sigma * rng.standard_normal(f.shape)
        w = w + np.asarray(nz.gyro_bias, float) + nz.gyro_sigma * rng.standard_normal(w.shape)
    return [ImuSample(float(t), a, b) for t, a, b in zip(times, f, w)]


def synthesize_sequence(spec: SyntheticSceneSpec, root) -> SequenceManifest:
    """Write a complete sequence directory for ``spec`` and load it back."""
    if isinstance(spec, dict):
        spec = SyntheticSceneSpec.from_dict(spec)
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    times = spec.frame_times()
    poses = []
    for t in times:
        pose = spec.camera_pose(t)
        poses.append(pose)
        rgb, depth = render_frame(spec, pose)
        name = f"{t:.{TIME_DECIMALS}f}.png"
        save_rgb_png(root / "rgb" / name, rgb)
        save_depth_png(root / "depth" / name, depth)
    write_imu_csv(root / "imu.csv", synthetic_imu(spec))
    nz = spec.noise
    calib = Calibration(spec.intrinsics, spec.extrinsics, ImuBias(nz.accel_bias, nz.gyro_bias),
                        gravity=tuple(spec.gravity))
    (root / "calib.txt").write_text(calib.to_text())
    Trajectory(times, poses).save_tum(root / "groundtruth.txt")
    (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    return load_sequence(root)
