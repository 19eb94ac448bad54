"""Frame-by-frame visual-inertial loop: IMU-seeded GICP tracking plus
keyframe-driven Gaussian map updates."""
from __future__ import annotations

import dataclasses
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .camera import CameraModel
from .dataset import SequenceManifest, load_sequence, save_depth_png, save_rgb_png
from .errors import InvalidArgumentError, VigsError
from .gicp import ReferenceMap, TrackerConfig, backproject, prepare_frame, track_frame
from .imu import (Extrinsics, GravityModel, ImuBias, NavState, imu_pose_from_camera,
                  initial_guess_camera, predict_relative_pose, preintegrate, update_from_tracking)
from .metrics import MetricsReport, Trajectory, ate_rmse, psnr, ssim
from .se3 import Pose
from .splat import (GaussianMap, Keyframe, MappingConfig, optimize_map, render, seed_from_cloud,
                    select_keyframe)

log = logging.getLogger(__name__)

INIT_MODES = ("imu", "identity", "constant-velocity")


@dataclass
class PipelineConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    # None means "take it from the sequence calibration"
    bias: ImuBias | None = None
    gravity: GravityModel | None = None
    extrinsics: Extrinsics | None = None
    init_mode: str = "imu"
    mapping_enabled: bool = True
    full_similarity: bool = True
    map_image_scale: float = 1.0
    output_dir: str | None = None

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise InvalidArgumentError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if not 0 < self.map_image_scale <= 1:
            raise InvalidArgumentError("map_image_scale must lie in (0, 1]")

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_text(cls, text: str, source: str = "config") -> "PipelineConfig":
        """Flat ``key = value`` lines; nested fields use dotted prefixes
        (``tracker.knn_k = 10``, ``mapping.lambda_i = 0.2``)."""
        sections = {"tracker": {}, "mapping": {}}
        top = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgumentError(f"{source}:{n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            head, _, rest = key.partition(".")
            if rest and head in sections:
                sections[head][rest] = (val, n)
            else:
                top[key] = (val, n)

        def typed(dc, items):
            hints = {f.name: f for f in dataclasses.fields(dc)}
            out = {}
            for k, (v, n) in items.items():
                if k not in hints:
                    raise InvalidArgumentError(f"{source}:{n}: unknown key {k!r}")
                out[k] = _coerce(v, type(getattr(dc(), k)), f"{source}:{n}")
            return out

        kw = {"tracker": TrackerConfig(**typed(TrackerConfig, sections["tracker"])),
              "mapping": MappingConfig(**typed(MappingConfig, sections["mapping"]))}
        vecs = {}
        for key, (val, n) in top.items():
            where = f"{source}:{n}"
            if key in ("imu.accel_bias", "imu.gyro_bias", "imu.gravity", "extrinsics.imu_to_camera"):
                vecs[key] = [float(v) for v in val.replace(",", " ").split()]
            elif key == "init_mode":
                kw["init_mode"] = val
            elif key in ("mapping_enabled", "full_similarity"):
                kw[key] = _coerce(val, bool, where)
            elif key == "map_image_scale":
                kw[key] = _coerce(val, float, where)
            elif key == "output_dir":
                kw[key] = val
            else:
                raise InvalidArgumentError(f"{where}: unknown key {key!r}")
        if "imu.accel_bias" in vecs or "imu.gyro_bias" in vecs:
            kw["bias"] = ImuBias(vecs.get("imu.accel_bias", [0, 0, 0]), vecs.get("imu.gyro_bias", [0, 0, 0]))
        if "imu.gravity" in vecs:
            kw["gravity"] = GravityModel(vecs["imu.gravity"])
        if "extrinsics.imu_to_camera" in vecs:
            kw["extrinsics"] = Extrinsics(Pose.from_tum(vecs["extrinsics.imu_to_camera"]))
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text(), str(path))


def _coerce(val: str, typ, where: str):
    try:
        if typ is bool:
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(val)
        if typ is float:
            return float(val)
        return val
    except ValueError:
        raise InvalidArgumentError(f"{where}: cannot parse {val!r} as {typ.__name__}") from None


@dataclass
class FrameSummary:
    index: int
    timestamp: float
    converged: bool
    iterations: int
    inliers: int
    final_cost: float
    keyframe: bool


@dataclass
class RunReport:
    trajectory: Trajectory
    frames: list
    keyframes: list
    metrics: MetricsReport
    timings: dict
    gaussian_map: GaussianMap | None = None


def _annotate(exc: Exception, k: int) -> Exception:
    exc.frame_index = k
    if exc.args:
        exc.args = (f"frame {k}: {exc.args[0]}",) + exc.args[1:]
    return exc


def _map_keyframe(camera: CameraModel, rgb, depth, index: int, scale: float) -> Keyframe:
    if scale == 1.0:
        return Keyframe(camera, rgb, depth, index)
    intr = camera.intrinsics.scaled(scale)
    size = (intr.width, intr.height)
    small_rgb = np.asarray(Image.fromarray(np.asarray(rgb, np.uint8)).resize(size, Image.BILINEAR))
    # nearest keeps depth edges from blending foreground and background
    small_d = np.asarray(Image.fromarray(np.asarray(depth, np.float32)).resize(size, Image.NEAREST), float)
    return Keyframe(CameraModel(intr, camera.pose), small_rgb, small_d, index)


def run_sequence(manifest: SequenceManifest, cfg: PipelineConfig | None = None) -> RunReport:
    cfg = cfg or PipelineConfig()
    calib = manifest.calibration
    intr = calib.intrinsics
    bias = cfg.bias or calib.bias
    gravity = cfg.gravity or GravityModel(calib.gravity)
    ext = cfg.extrinsics or calib.extrinsics
    tcfg, mcfg = cfg.tracker, cfg.mapping
    rng = np.random.default_rng(mcfg.seed)

    timings = defaultdict(float)
    reference = ReferenceMap(tcfg.voxel_downsample, tcfg.reference_mode)
    gmap = GaussianMap()
    keyframes, kf_indices, summaries = [], [], []
    poses, times = [], []
    nav = None
    last_kf_pose = None

    for k, rec in enumerate(manifest.frames):
        try:
            t0 = time.perf_counter()
            rgb, depth = manifest.load_rgb(k), manifest.load_depth(k)
            cloud = backproject(depth, intr, rgb, tcfg.stride)
            frame = prepare_frame(cloud, tcfg)
            timings["load"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            if k == 0:
                guess = Pose.identity()
            elif cfg.init_mode == "imu":
                delta = preintegrate(manifest.imu, times[-1], rec.timestamp, bias)
                rel = predict_relative_pose(delta, nav, gravity)
                guess = initial_guess_camera(rel, poses[-1], ext, cfg.full_similarity)
            elif cfg.init_mode == "constant-velocity" and k >= 2:
                guess = poses[-1] @ (poses[-2].inverse() @ poses[-1])
            else:
                guess = poses[-1]
            timings["preintegrate"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            result = track_frame(frame, reference, guess, tcfg)
            pose = result.pose
            if not result.converged:
                log.warning("frame %d: tracking did not converge, using the initial guess", k)
                pose = guess
            timings["track"] += time.perf_counter() - t0

            if k == 0:
                imu_pose = imu_pose_from_camera(pose, ext, cfg.full_similarity)
                nav = NavState(imu_pose.translation, np.zeros(3), imu_pose.rotation, rec.timestamp)
            else:
                nav = update_from_tracking(poses[-1], pose, ext, rec.timestamp - times[-1],
                                           timestamp=rec.timestamp, full_similarity=cfg.full_similarity)

            is_kf = select_keyframe(pose, last_kf_pose, mcfg)
            if is_kf:
                last_kf_pose = pose
                kf_indices.append(k)
                if k > 0:
                    reference.extend(frame, pose)
                if cfg.mapping_enabled:
                    t0 = time.perf_counter()
                    seed_from_cloud(gmap, frame, pose, mcfg)
                    cam = CameraModel.from_world_pose(intr, pose)
                    keyframes.append(_map_keyframe(cam, rgb, depth, k, cfg.map_image_scale))
                    optimize_map(gmap, keyframes, mcfg, rng=rng)
                    timings["map"] += time.perf_counter() - t0
        except VigsError as exc:
            raise _annotate(exc, k)

        poses.append(pose)
        times.append(rec.timestamp)
        summaries.append(FrameSummary(k, rec.timestamp, bool(result.converged), int(result.iterations),
                                      int(result.inlier_count), float(result.final_cost), is_kf))

    traj = Trajectory(np.array(times), poses)
    metrics = MetricsReport(frame_count=len(traj))
    if manifest.groundtruth is not None and len(traj) >= 3:
        metrics.ate_rmse, _ = ate_rmse(traj, manifest.groundtruth)
        metrics.extra["path_length"] = manifest.groundtruth.path_length()
    if cfg.mapping_enabled and keyframes:
        for kf in keyframes:
            out = render(gmap, kf.camera, mcfg.render_blur)
            metrics.psnr.append(psnr(out.color, kf.rgb))
            if min(kf.rgb.shape[:2]) >= 11:
                metrics.ssim.append(ssim(out.color, kf.rgb))
        metrics.extra["gaussians"] = len(gmap)
    metrics.extra["keyframes"] = len(kf_indices)
    metrics.extra["converged_frames"] = sum(s.converged for s in summaries)
    metrics.runtime = dict(timings)
    report = RunReport(traj, summaries, kf_indices, metrics, dict(timings),
                       gmap if cfg.mapping_enabled else None)
    if cfg.output_dir:
        write_outputs(report, cfg.output_dir, keyframes, intr, mcfg.render_blur)
    return report


def write_outputs(report: RunReport, out_dir, keyframes=(), intrinsics=None, blur: float = 0.3) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.trajectory.save_tum(out / "trajectory.txt")
    # wall-clock numbers stay out of metrics.txt so reruns compare equal
    report.metrics.runtime = {}
    report.metrics.write(out / "metrics.txt")
    report.metrics.runtime = dict(report.timings)
    (out / "timings.txt").write_text("".join(f"{k}={v:.6f}\n" for k, v in sorted(report.timings.items())))
    if report.gaussian_map is not None:
        report.gaussian_map.save(out / "map.npz", intrinsics)
        renders = out / "renders"
        renders.mkdir(exist_ok=True)
        for kf in keyframes:
            r = render(report.gaussian_map, kf.camera, blur)
            ts = report.trajectory.timestamps[kf.index]
            save_rgb_png(renders / f"{ts:.6f}.png", r.color)
            save_depth_png(renders / f"{ts:.6f}_depth.png", r.depth)


class VisualInertialSlam(BaseEstimator):
    """Scikit-learn style front end to :func:`run_sequence`.

    ``fit`` takes a sequence directory or a loaded manifest; ``predict``
    returns the estimated trajectory; ``score`` is the negative ATE RMSE
    against the sequence ground truth.
    """

    def __init__(self, init_mode="imu", mapping_enabled=True, knn_k=10, max_iterations=30,
                 max_correspondence_dist=0.5, voxel_downsample=0.05, stride=2, reference_mode="map",
                 lambda_i=0.2, lambda_d=0.5, iterations_per_keyframe=30, map_image_scale=1.0, seed=0):
        self.init_mode = init_mode
        self.mapping_enabled = mapping_enabled
        self.knn_k = knn_k
        self.max_iterations = max_iterations
        self.max_correspondence_dist = max_correspondence_dist
        self.voxel_downsample = voxel_downsample
        self.stride = stride
        self.reference_mode = reference_mode
        self.lambda_i = lambda_i
        self.lambda_d = lambda_d
        self.iterations_per_keyframe = iterations_per_keyframe
        self.map_image_scale = map_image_scale
        self.seed = seed

    def _config(self) -> PipelineConfig:
        tracker = TrackerConfig(knn_k=self.knn_k, max_iterations=self.max_iterations,
                                max_correspondence_dist=self.max_correspondence_dist,
                                voxel_downsample=self.voxel_downsample, stride=self.stride,
                                reference_mode=self.reference_mode)
        mapping = MappingConfig(lambda_i=self.lambda_i, lambda_d=self.lambda_d,
                                iterations_per_keyframe=self.iterations_per_keyframe, seed=self.seed)
        return PipelineConfig(tracker, mapping, init_mode=self.init_mode,
                              mapping_enabled=self.mapping_enabled, map_image_scale=self.map_image_scale)

    @staticmethod
    def _manifest(X) -> SequenceManifest:
        return X if isinstance(X, SequenceManifest) else load_sequence(X)

    def fit(self, X, y=None):
        self.report_ = run_sequence(self._manifest(X), self._config())
        self.trajectory_ = self.report_.trajectory
        return self

    def predict(self, X=None) -> Trajectory:
        check_is_fitted(self, "trajectory_")
        return self.trajectory_

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "trajectory_")
        ref = y if isinstance(y, Trajectory) else self._manifest(X).groundtruth
        if ref is None:
            raise InvalidArgumentError("no reference trajectory to score against")
        return -ate_rmse(self.trajectory_, ref)[0]
