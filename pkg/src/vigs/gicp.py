"""Generalized-ICP tracking of RGB-D frames against a reference cloud.

Each point carries a plane-like covariance estimated from its neighbors. A pose
``T`` (world-from-camera) aligns source to target by minimizing

    sum_m  d_m^T (C_tgt_m + R C_src_m R^T)^-1 d_m,    d_m = y_m - T x_m

with damped Gauss-Newton over re-estimated nearest-neighbor correspondences.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .camera import CameraIntrinsics
from .errors import (DegenerateGeometryError, EmptyFrameError, EmptyTargetError,
                     InsufficientPointsError, InvalidArgumentError)
from .se3 import Pose, so3_exp
from ._validation import check_points

log = logging.getLogger(__name__)

MAX_DEPTH = 20.0
MIN_CORRESPONDENCES = 6


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = check_points(self.points, "points")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise InvalidArgumentError("colors and points differ in length")

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], None if self.colors is None else self.colors[idx])

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.transform_points(self.points), self.colors)


@dataclass
class GaussianCloud:
    cloud: PointCloud
    covariances: np.ndarray

    def __post_init__(self):
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
        if len(self.covariances) != len(self.cloud):
            raise InvalidArgumentError("covariances and points differ in length")

    def __len__(self):
        return len(self.cloud)

    @property
    def points(self):
        return self.cloud.points

    @property
    def colors(self):
        return self.cloud.colors

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(self.cloud.subset(idx), self.covariances[idx])

    def transformed(self, pose: Pose) -> "GaussianCloud":
        r = pose.rotation.matrix
        return GaussianCloud(self.cloud.transformed(pose), r @ self.covariances @ r.T)


@dataclass(frozen=True)
class TrackerConfig:
    knn_k: int = 10
    max_iterations: int = 30
    translation_eps: float = 1e-5
    rotation_eps: float = 1e-5
    max_correspondence_dist: float = 0.5
    voxel_downsample: float = 0.05
    cov_floor: float = 1e-3
    stride: int = 2
    reference_mode: str = "map"  # "map" | "keyframe"

    def __post_init__(self):
        if self.knn_k < 4:
            raise InvalidArgumentError("knn_k must be >= 4")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        for name in ("translation_eps", "rotation_eps", "max_correspondence_dist",
                     "voxel_downsample", "cov_floor"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.stride < 1:
            raise InvalidArgumentError("stride must be >= 1")
        if self.reference_mode not in ("map", "keyframe"):
            raise InvalidArgumentError(f"unknown reference_mode {self.reference_mode!r}")


@dataclass
class TrackingResult:
    pose: Pose
    final_cost: float
    iterations: int
    inlier_count: int
    converged: bool
    cost_history: list = field(default_factory=list)
    """(cost before, cost after) for each accepted step, same correspondences."""


@dataclass
class Correspondences:
    src_idx: np.ndarray
    tgt_idx: np.ndarray
    distances: np.ndarray
    info: np.ndarray

    def __len__(self):
        return len(self.src_idx)


def backproject(depth, intrinsics: CameraIntrinsics, rgb=None, stride: int = 1,
                max_depth: float = MAX_DEPTH) -> PointCloud:
    """Camera-frame points for valid depth pixels, sampled every ``stride`` pixels."""
    depth = np.asarray(depth, dtype=float)
    if depth.shape != intrinsics.shape:
        raise InvalidArgumentError(f"depth shape {depth.shape} != intrinsics {intrinsics.shape}")
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    d = depth[::stride, ::stride]
    v, u = np.mgrid[0:depth.shape[0]:stride, 0:depth.shape[1]:stride]
    valid = np.isfinite(d) & (d > 0) & (d <= max_depth)
    z = d[valid]
    pts = np.stack([(u[valid] - intrinsics.cx) / intrinsics.fx * z,
                    (v[valid] - intrinsics.cy) / intrinsics.fy * z, z], axis=1)
    colors = None
    if rgb is not None:
        rgb = np.asarray(rgb)
        if rgb.shape[:2] != depth.shape:
            raise InvalidArgumentError("rgb and depth shapes differ")
        c = rgb[::stride, ::stride][valid].astype(float)
        colors = c / 255.0 if np.issubdtype(rgb.dtype, np.integer) else c
    return PointCloud(pts, colors)


def voxel_keys(points: np.ndarray, size: float) -> np.ndarray:
    """Pack integer voxel coordinates into one int64 per point."""
    ijk = np.floor(points / size).astype(np.int64) + (1 << 20)
    if ijk.size and (ijk.min() < 0 or ijk.max() >= (1 << 21)):
        raise InvalidArgumentError("points exceed the voxel hashing range")
    return (ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2]


def voxel_downsample_indices(points: np.ndarray, size: float) -> np.ndarray:
    """Index of the first point in each occupied voxel, in original order."""
    if len(points) == 0:
        return np.zeros(0, dtype=int)
    _, first = np.unique(voxel_keys(points, size), return_index=True)
    return np.sort(first)


def regularize_covariances(cov: np.ndarray, eps_floor: float) -> np.ndarray:
    """Replace each spectrum by ``(1, 1, eps_floor)``, keeping eigenvectors."""
    _, vecs = np.linalg.eigh(cov)  # ascending: smallest first
    spec = np.array([eps_floor, 1.0, 1.0])
    out = np.einsum("nij,j,nkj->nik", vecs, spec, vecs)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def estimate_covariances(cloud: PointCloud, k: int = 10, eps_floor: float = 1e-3,
                         tree: cKDTree | None = None) -> GaussianCloud:
    """Per-point covariance of the point and its ``k`` nearest neighbors."""
    n = len(cloud)
    if n < k + 1:
        raise InsufficientPointsError(f"need at least {k + 1} points for k={k}, got {n}")
    tree = tree or cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k + 1)
    nb = cloud.points[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    return GaussianCloud(cloud, regularize_covariances(cov, eps_floor))


def prepare_frame(cloud: PointCloud, cfg: TrackerConfig) -> GaussianCloud:
    """Covariances on the full-resolution cloud, then voxel downsampling."""
    g = estimate_covariances(cloud, cfg.knn_k, cfg.cov_floor)
    return g.subset(voxel_downsample_indices(cloud.points, cfg.voxel_downsample))


class SpatialIndex:
    """Immutable kd-tree over a target GaussianCloud."""

    def __init__(self, target: GaussianCloud):
        if len(target) == 0:
            raise EmptyTargetError("target cloud is empty")
        self.target = target
        self.tree = cKDTree(target.points)

    def __len__(self):
        return len(self.target)

    def nearest(self, pts: np.ndarray, max_dist: float):
        """Nearest target index per query (ties -> lowest index); -1 if none."""
        d, i = self.tree.query(pts, k=2, distance_upper_bound=max_dist)
        n = len(self.target)
        tie = (d[:, 0] == d[:, 1]) & (i[:, 1] < i[:, 0]) & (i[:, 1] < n)
        best_i = np.where(tie, i[:, 1], i[:, 0])
        best_d = d[:, 0]
        best_i = np.where(best_i >= n, -1, best_i)
        return best_d, best_i


def _fused_information(cov_src, cov_tgt, r):
    fused = cov_tgt + r @ cov_src @ r.T
    return np.linalg.inv(fused)


def find_correspondences(src: GaussianCloud, tgt_index: SpatialIndex, guess: Pose,
                         max_dist: float) -> Correspondences:
    if tgt_index is None or len(tgt_index) == 0:
        raise EmptyTargetError("target index is empty")
    moved = guess.transform_points(src.points)
    dist, nn = tgt_index.nearest(moved, max_dist)
    keep = nn >= 0
    si = np.flatnonzero(keep)
    ti = nn[keep]
    info = _fused_information(src.covariances[si], tgt_index.target.covariances[ti],
                              guess.rotation.matrix)
    return Correspondences(si, ti, dist[keep], info)


def _residuals(src_pts, tgt_pts, pose: Pose):
    p = pose.transform_points(src_pts)
    return tgt_pts - p, p


def gicp_cost(src: GaussianCloud, tgt: GaussianCloud, corr: Correspondences, pose: Pose,
              recompute_info: bool = True) -> float:
    d, _ = _residuals(src.points[corr.src_idx], tgt.points[corr.tgt_idx], pose)
    info = corr.info
    if recompute_info:
        info = _fused_information(src.covariances[corr.src_idx], tgt.covariances[corr.tgt_idx],
                                  pose.rotation.matrix)
    return float(np.einsum("mi,mij,mj->", d, info, d))


def _linearize(src_pts, tgt_pts, info, pose: Pose):
    """Cost, Gauss-Newton Hessian and gradient for a left perturbation
    ``Exp(delta) @ pose`` with ``delta = (rotation, translation)``."""
    d, p = _residuals(src_pts, tgt_pts, pose)
    m = len(d)
    jac = np.zeros((m, 3, 6))
    # d(delta) ~ d + skew(p) dw - dv
    jac[:, 0, 1], jac[:, 0, 2] = -p[:, 2], p[:, 1]
    jac[:, 1, 0], jac[:, 1, 2] = p[:, 2], -p[:, 0]
    jac[:, 2, 0], jac[:, 2, 1] = -p[:, 1], p[:, 0]
    jac[:, :, 3:] = -np.eye(3)
    info_j = info @ jac
    hess = np.einsum("mki,mkj->ij", jac, info_j)
    grad = np.einsum("mki,mk->i", info_j, d)
    cost = float(np.einsum("mi,mij,mj->", d, info, d))
    return cost, hess, grad


def optimize_pose(src: GaussianCloud, tgt: GaussianCloud | SpatialIndex, guess: Pose,
                  cfg: TrackerConfig | None = None) -> TrackingResult:
    """Damped Gauss-Newton GICP from ``guess``. Raises DegenerateGeometryError
    when fewer than six correspondences survive gating."""
    cfg = cfg or TrackerConfig()
    index = tgt if isinstance(tgt, SpatialIndex) else SpatialIndex(tgt)
    target = index.target
    if len(src) == 0:
        raise EmptyFrameError("source cloud is empty")
    pose = guess
    lam = 1e-4
    converged = False
    history = []
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        corr = find_correspondences(src, index, pose, cfg.max_correspondence_dist)
        if len(corr) < MIN_CORRESPONDENCES:
            raise DegenerateGeometryError(
                f"{len(corr)} correspondences at iteration {it} (< {MIN_CORRESPONDENCES})")
        sp, tp = src.points[corr.src_idx], target.points[corr.tgt_idx]
        cost0, hess, grad = _linearize(sp, tp, corr.info, pose)
        if cost0 == 0.0:
            converged = True
            break
        diag = np.diag(np.diag(hess))
        step = None
        for _ in range(12):
            try:
                delta = -np.linalg.solve(hess + lam * diag, grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = Pose(so3_exp(delta[:3]), delta[3:]) @ pose
            cost1 = gicp_cost(src, target, corr, trial)
            if cost1 <= cost0:
                step = delta
                break
            lam *= 10.0
        if step is None:
            # no descent direction left at this linearization
            converged = True
            break
        history.append((cost0, cost1))
        pose = trial
        lam = max(lam * 0.1, 1e-12)
        if np.linalg.norm(step[3:]) < cfg.translation_eps and np.linalg.norm(step[:3]) < cfg.rotation_eps:
            converged = True
            break
    final = find_correspondences(src, index, pose, cfg.max_correspondence_dist)
    final_cost = gicp_cost(src, target, final, pose) if len(final) else 0.0
    return TrackingResult(pose, final_cost, it, len(final), converged, history)


class ReferenceMap:
    """Accumulated, voxel-deduplicated reference cloud in world coordinates."""

    def __init__(self, voxel_size: float = 0.05, mode: str = "map"):
        self.voxel_size = voxel_size
        self.mode = mode
        self._points = np.zeros((0, 3))
        self._covs = np.zeros((0, 3, 3))
        self._keys = np.zeros(0, dtype=np.int64)
        self._index = None
        self.generation = 0

    def __len__(self):
        return len(self._points)

    @property
    def cloud(self) -> GaussianCloud:
        return GaussianCloud(PointCloud(self._points), self._covs)

    @property
    def index(self) -> SpatialIndex:
        if self._index is None:
            self._index = SpatialIndex(self.cloud)
        return self._index

    def extend(self, frame: GaussianCloud, pose: Pose) -> int:
        """Add the frame (camera coordinates) seen from ``pose``; returns the
        number of newly occupied voxels."""
        world = frame.transformed(pose)
        if self.mode == "keyframe":
            self._points = np.zeros((0, 3))
            self._covs = np.zeros((0, 3, 3))
            self._keys = np.zeros(0, dtype=np.int64)
        keys = voxel_keys(world.points, self.voxel_size)
        _, first = np.unique(keys, return_index=True)
        first = np.sort(first)
        first = first[~np.isin(keys[first], self._keys)]
        if len(first):
            self._points = np.concatenate([self._points, world.points[first]])
            self._covs = np.concatenate([self._covs, world.covariances[first]])
            self._keys = np.concatenate([self._keys, keys[first]])
        self._index = None
        self.generation += 1
        return len(first)


def track_frame(frame_cloud: GaussianCloud, map_reference: ReferenceMap, imu_guess: Pose,
                cfg: TrackerConfig | None = None) -> TrackingResult:
    """Track one frame; the first call bootstraps an empty reference."""
    cfg = cfg or TrackerConfig()
    if len(frame_cloud) == 0:
        raise EmptyFrameError("frame produced no valid points")
    if len(map_reference) == 0:
        map_reference.extend(frame_cloud, Pose.identity())
        return TrackingResult(Pose.identity(), 0.0, 0, len(frame_cloud), True)
    try:
        return optimize_pose(frame_cloud, map_reference.index, imu_guess, cfg)
    except DegenerateGeometryError as exc:
        log.warning("tracking degenerate, keeping initial guess: %s", exc)
        return TrackingResult(imu_guess, float("nan"), 0, 0, False)


class GICPTracker(BaseEstimator):
    """Scikit-learn style GICP registration.

    ``fit(source, target, init_pose=None)`` estimates the pose mapping source
    points onto target points; ``transform`` applies it to new points.
    Inputs are (N, 3) arrays or :class:`GaussianCloud` objects.
    """

    def __init__(self, knn_k=10, max_iterations=30, translation_eps=1e-5, rotation_eps=1e-5,
                 max_correspondence_dist=0.5, cov_floor=1e-3):
        self.knn_k = knn_k
        self.max_iterations = max_iterations
        self.translation_eps = translation_eps
        self.rotation_eps = rotation_eps
        self.max_correspondence_dist = max_correspondence_dist
        self.cov_floor = cov_floor

    def _config(self) -> TrackerConfig:
        return TrackerConfig(knn_k=self.knn_k, max_iterations=self.max_iterations,
                             translation_eps=self.translation_eps, rotation_eps=self.rotation_eps,
                             max_correspondence_dist=self.max_correspondence_dist,
                             cov_floor=self.cov_floor)

    def _as_gaussian(self, x) -> GaussianCloud:
        if isinstance(x, GaussianCloud):
            return x
        return estimate_covariances(PointCloud(check_points(x)), self.knn_k, self.cov_floor)

    def fit(self, X, y, init_pose: Pose | None = None):
        cfg = self._config()
        src, tgt = self._as_gaussian(X), self._as_gaussian(y)
        self.result_ = optimize_pose(src, tgt, init_pose or Pose.identity(), cfg)
        self.pose_ = self.result_.pose
        self.n_iter_ = self.result_.iterations
        return self

    def transform(self, X):
        check_is_fitted(self, "pose_")
        return self.pose_.transform_points(check_points(X))

    def score(self, X, y):
        """Negative final GICP cost on (X, y) at the fitted pose."""
        check_is_fitted(self, "pose_")
        src, tgt = self._as_gaussian(X), self._as_gaussian(y)
        corr = find_correspondences(src, SpatialIndex(tgt), self.pose_, self.max_correspondence_dist)
        return -gicp_cost(src, tgt, corr, self.pose_)
