"""3D Gaussian map: seeding, rasterization, mapping loss and optimization.

Each Gaussian has a center, an orientation ``R``, per-axis scales ``s`` (stored
in descending order, ``R[:, i]`` is the axis scaled by ``s[i]``) so that
``Sigma = R diag(s)^2 R^T``, a flat RGB color and an opacity.

Rendering projects every Gaussian to a 2D footprint (first-order transport of
``Sigma`` through the pinhole projection), sorts Gaussians front to back by the
camera-frame depth of their centers, and alpha-composites per pixel::

    C_p = sum_m c_m a_m prod_{n<m} (1 - a_n)
    O_p = sum_m     a_m prod_{n<m} (1 - a_n)

Depth is the alpha-weighted expected depth ``sum_m z_m a_m T_m / max(O_p, 1e-6)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_same_shape
from .camera import CameraIntrinsics, CameraModel
from .errors import InvalidArgumentError, MissingColorError
from .gicp import GaussianCloud, backproject, estimate_covariances, voxel_downsample_indices
from .metrics import psnr, ssim
from .se3 import Pose, Rotation, so3_exp_batch

SCALE_MIN, SCALE_MAX = 1e-4, 5.0
ALPHA_MAX = 0.999
ALPHA_CULL = 1.0 / 255.0
NEAR_PLANE = 0.01
DEPTH_EPS = 1e-6
GRAD_FLOOR = 1e-12


@dataclass
class MapGaussian:
    center: np.ndarray
    orientation: Rotation
    scales: np.ndarray
    color: np.ndarray
    opacity: float

    @property
    def covariance(self) -> np.ndarray:
        r = self.orientation.matrix
        return r @ np.diag(np.asarray(self.scales) ** 2) @ r.T


@dataclass(frozen=True)
class MappingConfig:
    lambda_i: float = 0.2
    lambda_d: float = 0.5
    iterations_per_keyframe: int = 30
    lr_means: float = 1e-4
    lr_colors: float = 2.5e-3
    lr_opacities: float = 5e-2
    lr_scales: float = 1e-3
    lr_rotations: float = 1e-3
    optimizer: str = "adam"  # "adam" | "sgd"
    opacity_init: float = 0.7
    prune_opacity: float = 0.05
    keyframe_translation: float = 0.3
    keyframe_rotation_deg: float = 15.0
    seed_voxel: float = 0.05
    seed_scale_factor: float = 0.5
    scale_norm_factor: float = 3.0
    keyframe_window: int = 8
    render_blur: float = 0.3
    # per-pixel contributions below this alpha are skipped while optimizing
    alpha_cutoff: float = 1.0 / 255.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_i <= 1.0:
            raise InvalidArgumentError("lambda_i must lie in [0, 1]")
        if self.lambda_d < 0:
            raise InvalidArgumentError("lambda_d must be non-negative")
        if self.iterations_per_keyframe < 1:
            raise InvalidArgumentError("iterations_per_keyframe must be >= 1")
        if not 0 < self.alpha_cutoff < ALPHA_CULL + 1e-12:
            raise InvalidArgumentError("alpha_cutoff must lie in (0, 1/255]")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    transmittance: np.ndarray


_PARAMS = ("means", "rotations", "scales", "colors", "opacities")


class GaussianMap:
    """Structure-of-arrays store of map Gaussians."""

    def __init__(self, means=None, rotations=None, scales=None, colors=None, opacities=None):
        self.means = np.zeros((0, 3)) if means is None else np.asarray(means, float).reshape(-1, 3)
        n = len(self.means)
        self.rotations = (np.tile(np.eye(3), (n, 1, 1)) if rotations is None
                          else np.asarray(rotations, float).reshape(-1, 3, 3))
        self.scales = (np.full((n, 3), 0.01) if scales is None
                       else np.asarray(scales, float).reshape(-1, 3))
        self.colors = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, float).reshape(-1, 3)
        self.opacities = (np.full(n, 0.7) if opacities is None
                          else np.asarray(opacities, float).reshape(-1))
        self.birth = np.zeros(n, dtype=int)
        self.generation = 0
        for name in _PARAMS:
            if len(getattr(self, name)) != n:
                raise InvalidArgumentError(f"{name} length differs from means")

    def __len__(self):
        return len(self.means)

    @property
    def gaussians(self) -> list[MapGaussian]:
        return [MapGaussian(self.means[i].copy(), Rotation(self.rotations[i]), self.scales[i].copy(),
                            self.colors[i].copy(), float(self.opacities[i])) for i in range(len(self))]

    def copy(self) -> "GaussianMap":
        out = GaussianMap(*(getattr(self, n).copy() for n in _PARAMS))
        out.birth = self.birth.copy()
        out.generation = self.generation
        return out

    def append(self, means, rotations, scales, colors, opacities) -> int:
        n = len(means)
        if n == 0:
            return 0
        self.means = np.concatenate([self.means, means])
        self.rotations = np.concatenate([self.rotations, rotations])
        self.scales = np.concatenate([self.scales, np.clip(scales, SCALE_MIN, SCALE_MAX)])
        self.colors = np.concatenate([self.colors, np.clip(colors, 0, 1)])
        self.opacities = np.concatenate([self.opacities, np.clip(opacities, 0, 1)])
        self.generation += 1
        self.birth = np.concatenate([self.birth, np.full(n, self.generation)])
        return n

    def add(self, g: MapGaussian) -> None:
        self.append(np.asarray(g.center, float)[None], g.orientation.matrix[None],
                    np.asarray(g.scales, float)[None], np.asarray(g.color, float)[None],
                    np.array([g.opacity], float))

    def keep(self, mask) -> int:
        mask = np.asarray(mask, bool)
        removed = int((~mask).sum())
        if removed:
            for name in _PARAMS + ("birth",):
                setattr(self, name, getattr(self, name)[mask])
            self.generation += 1
        return removed

    def permuted(self, order) -> "GaussianMap":
        out = GaussianMap(*(getattr(self, n)[order] for n in _PARAMS))
        out.birth = self.birth[order]
        return out

    def save(self, path, intrinsics: CameraIntrinsics | None = None) -> None:
        extra = {}
        if intrinsics is not None:
            extra["intrinsics"] = np.array([intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
                                            intrinsics.width, intrinsics.height], float)
        quats = np.array([Rotation(r).as_quat() for r in self.rotations]).reshape(-1, 4)
        with open(path, "wb") as fh:
            np.savez(fh, means=self.means, quats_xyzw=quats, scales=self.scales, colors=self.colors,
                     opacities=self.opacities, **extra)

    @classmethod
    def load(cls, path):
        """Returns ``(map, intrinsics or None)``."""
        with np.load(path) as z:
            rots = np.array([Rotation.from_quat(q).matrix for q in z["quats_xyzw"]]).reshape(-1, 3, 3)
            m = cls(z["means"], rots, z["scales"], z["colors"], z["opacities"])
            intr = None
            if "intrinsics" in z:
                fx, fy, cx, cy, w, h = z["intrinsics"]
                intr = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
        return m, intr


# ---------------------------------------------------------------- rendering

@dataclass
class _Projection:
    idx: np.ndarray        # map index of each visible Gaussian
    x_cam: np.ndarray
    jac: np.ndarray        # (n, 2, 3) projection Jacobian
    cov_cam: np.ndarray    # (n, 3, 3)
    conic: np.ndarray      # (n, 2, 2) inverse screen covariance
    uv: np.ndarray
    rank: np.ndarray       # depth order among visible Gaussians


@dataclass
class _Raster:
    proj: _Projection
    shape: tuple
    gid: np.ndarray        # visible-Gaussian index per entry, entries sorted by (pixel, depth)
    pix: np.ndarray
    delta: np.ndarray
    alpha_raw: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray      # transmittance in front of each entry
    weight: np.ndarray
    level_order: np.ndarray
    level_bounds: np.ndarray
    group: np.ndarray
    n_groups: int
    color: np.ndarray
    depth_num: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    final_trans: np.ndarray


def _project(gmap: GaussianMap, cam: CameraModel, blur: float) -> _Projection:
    r_cw = cam.pose.rotation.matrix
    x_cam = gmap.means @ r_cw.T + cam.pose.translation
    visible = (x_cam[:, 2] > NEAR_PLANE) & (gmap.opacities >= ALPHA_CULL)
    idx = np.flatnonzero(visible)
    x = x_cam[idx]
    z = x[:, 2]
    fx, fy = cam.fx, cam.fy
    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x[:, 0] / z ** 2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * x[:, 1] / z ** 2
    rot = gmap.rotations[idx]
    s2 = gmap.scales[idx] ** 2
    cov_world = np.einsum("nij,nj,nkj->nik", rot, s2, rot)
    cov_cam = r_cw @ cov_world @ r_cw.T
    cov2 = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2[:, 0, 0] += blur
    cov2[:, 1, 1] += blur
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2)
    conic[:, 0, 0] = c / det
    conic[:, 1, 1] = a / det
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det
    uv = np.stack([fx * x[:, 0] / z + cam.cx, fy * x[:, 1] / z + cam.cy], axis=1)
    # content-based tie-break keeps the order independent of storage order
    keys = (gmap.opacities[idx], *gmap.colors[idx].T[::-1], *gmap.scales[idx].T[::-1],
            *gmap.means[idx].T[::-1], z)
    order = np.lexsort(keys)
    rank = np.empty(len(idx), dtype=np.int64)
    rank[order] = np.arange(len(idx))
    return _Projection(idx, x, jac, cov_cam, conic, uv, rank)


def _footprints(proj: _Projection, opac: np.ndarray, height: int, width: int, alpha_eps: float):
    cov2 = np.linalg.inv(proj.conic)
    lam = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1]) + np.sqrt(
        0.25 * (cov2[:, 0, 0] - cov2[:, 1, 1]) ** 2 + cov2[:, 0, 1] ** 2)
    radius = np.sqrt(2.0 * np.log(np.maximum(opac / alpha_eps, 1.0)) * lam)
    x0 = np.maximum(np.ceil(proj.uv[:, 0] - radius), 0).astype(np.int64)
    x1 = np.minimum(np.floor(proj.uv[:, 0] + radius), width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(proj.uv[:, 1] - radius), 0).astype(np.int64)
    y1 = np.minimum(np.floor(proj.uv[:, 1] + radius), height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    return x0, y0, nx, ny


def _rasterize(gmap: GaussianMap, cam: CameraModel, blur: float = 0.3,
               alpha_eps: float = 1e-12) -> _Raster:
    h, w = cam.height, cam.width
    proj = _project(gmap, cam, blur)
    opac = gmap.opacities[proj.idx]
    x0, y0, nx, ny = _footprints(proj, opac, h, w, alpha_eps)
    counts = nx * ny
    total = int(counts.sum())
    gid = np.repeat(np.arange(len(proj.idx)), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(starts, counts)
    px = x0[gid] + local % np.maximum(nx[gid], 1)
    py = y0[gid] + local // np.maximum(nx[gid], 1)
    delta = np.stack([px - proj.uv[gid, 0], py - proj.uv[gid, 1]], axis=1)
    q = proj.conic[gid]
    power = -0.5 * (q[:, 0, 0] * delta[:, 0] ** 2 + 2 * q[:, 0, 1] * delta[:, 0] * delta[:, 1]
                    + q[:, 1, 1] * delta[:, 1] ** 2)
    alpha_raw = opac[gid] * np.exp(power)
    keep = alpha_raw >= alpha_eps
    gid, delta, alpha_raw = gid[keep], delta[keep], alpha_raw[keep]
    pix = (py * w + px)[keep]
    order = np.lexsort((proj.rank[gid], pix))
    gid, delta, alpha_raw, pix = gid[order], delta[order], alpha_raw[order], pix[order]
    alpha = np.minimum(alpha_raw, ALPHA_MAX)

    n = len(pix)
    new_group = np.ones(n, bool)
    new_group[1:] = pix[1:] != pix[:-1]
    group = np.cumsum(new_group) - 1
    n_groups = int(group[-1]) + 1 if n else 0
    group_start = np.flatnonzero(new_group)
    pos = np.arange(n) - group_start[group] if n else np.zeros(0, int)
    # level-major traversal gives exact sequential products per pixel
    level_order = np.lexsort((group, pos))
    level_bounds = np.searchsorted(pos[level_order], np.arange(int(pos.max()) + 2 if n else 1))
    trans = np.empty(n)
    t_group = np.ones(n_groups)
    for j in range(len(level_bounds) - 1):
        sel = level_order[level_bounds[j]:level_bounds[j + 1]]
        g = group[sel]
        trans[sel] = t_group[g]
        t_group[g] = t_group[g] * (1.0 - alpha[sel])
    weight = alpha * trans

    npix = h * w
    z = proj.x_cam[:, 2]
    rgb = gmap.colors[proj.idx]
    color = np.stack([np.bincount(pix, weight * rgb[gid, c], minlength=npix) for c in range(3)], axis=1)
    opacity = np.bincount(pix, weight, minlength=npix)
    depth_num = np.bincount(pix, weight * z[gid], minlength=npix)
    depth = depth_num / np.maximum(opacity, DEPTH_EPS)
    final_trans = np.ones(npix)
    if n:
        final_trans[pix[group_start]] = t_group
    return _Raster(proj, (h, w), gid, pix, delta, alpha_raw, alpha, trans, weight, level_order,
                   level_bounds, group, n_groups, color, depth_num, opacity, depth, final_trans)


def _output(r: _Raster) -> RenderOutput:
    h, w = r.shape
    return RenderOutput(np.clip(r.color.reshape(h, w, 3), 0.0, 1.0), r.depth.reshape(h, w),
                        np.clip(r.opacity.reshape(h, w), 0.0, 1.0), r.final_trans.reshape(h, w))


def render(gmap: GaussianMap, cam: CameraModel, blur: float = 0.3,
           alpha_cutoff: float = 1e-12) -> RenderOutput:
    """Rasterize the map from ``cam`` (pose is camera-from-world).

    The default cutoff keeps every contribution that is representable in
    practice; the optimizer passes a coarser one for speed.
    """
    return _output(_rasterize(gmap, cam, blur, alpha_cutoff))


@dataclass
class MapGradients:
    means: np.ndarray
    rotations: np.ndarray   # local axis-angle increments
    scales: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n))

    def __iadd__(self, other):
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def scaled(self, s):
        return MapGradients(*(getattr(self, f.name) * s for f in fields(self)))


_SKEW_BASIS = np.array([[[0, 0, 0], [0, 0, -1], [0, 1, 0]],
                        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
                        [[0, -1, 0], [1, 0, 0], [0, 0, 0]]], float)


def _backward(gmap: GaussianMap, cam: CameraModel, r: _Raster, d_color, d_depth,
              d_opacity=None) -> MapGradients:
    """Gradients of a scalar loss given its derivatives w.r.t. the raw
    composited color (H, W, 3), depth (H, W) and optionally opacity (H, W)."""
    proj = r.proj
    npix = r.shape[0] * r.shape[1]
    d_color = np.asarray(d_color, float).reshape(npix, 3)
    d_depth = np.zeros(npix) if d_depth is None else np.asarray(d_depth, float).reshape(npix)
    d_opac = np.zeros(npix) if d_opacity is None else np.asarray(d_opacity, float).reshape(npix).copy()
    o_safe = np.maximum(r.opacity, DEPTH_EPS)
    d_num = d_depth / o_safe
    d_opac += np.where(r.opacity > DEPTH_EPS, -d_depth * r.depth_num / o_safe ** 2, 0.0)

    gid, pix = r.gid, r.pix
    n_vis = len(proj.idx)
    z = proj.x_cam[:, 2]
    rgb = gmap.colors[proj.idx]
    # per-entry scalar "feature" seen by the loss
    s = (d_color[pix] * rgb[gid]).sum(axis=1) + d_num[pix] * z[gid] + d_opac[pix]
    sw = s * r.weight
    behind = np.empty(len(pix))
    acc = np.zeros(r.n_groups)
    for j in range(len(r.level_bounds) - 2, -1, -1):
        sel = r.level_order[r.level_bounds[j]:r.level_bounds[j + 1]]
        g = r.group[sel]
        behind[sel] = acc[g]
        acc[g] = acc[g] + sw[sel]
    d_alpha = r.trans * s - behind / (1.0 - r.alpha)
    d_alpha = np.where(r.alpha_raw < ALPHA_MAX, d_alpha, 0.0)

    d_rgb = np.stack([np.bincount(gid, r.weight * d_color[pix, c], minlength=n_vis) for c in range(3)], 1)
    d_z = np.bincount(gid, r.weight * d_num[pix], minlength=n_vis)

    opac = gmap.opacities[proj.idx]
    g_raw = d_alpha * r.alpha_raw  # d loss / d power
    d_op = np.bincount(gid, d_alpha * r.alpha_raw / opac[gid], minlength=n_vis)
    q = proj.conic[gid]
    q_delta = np.einsum("nij,nj->ni", q, r.delta)
    # power = -1/2 delta^T Q delta, delta = pixel - uv
    d_uv = np.stack([np.bincount(gid, g_raw * q_delta[:, c], minlength=n_vis) for c in range(2)], 1)
    dd = r.delta
    d_conic = np.zeros((n_vis, 2, 2))
    d_conic[:, 0, 0] = np.bincount(gid, -0.5 * g_raw * dd[:, 0] ** 2, minlength=n_vis)
    d_conic[:, 1, 1] = np.bincount(gid, -0.5 * g_raw * dd[:, 1] ** 2, minlength=n_vis)
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = np.bincount(gid, -0.5 * g_raw * dd[:, 0] * dd[:, 1],
                                                      minlength=n_vis)
    d_cov2 = -proj.conic @ d_conic @ proj.conic
    jac, m = proj.jac, proj.cov_cam
    d_m = np.swapaxes(jac, 1, 2) @ d_cov2 @ jac
    d_jac = 2.0 * d_cov2 @ jac @ m

    x = proj.x_cam
    fx, fy = cam.fx, cam.fy
    zz = x[:, 2]
    d_x = np.einsum("nji,nj->ni", jac, d_uv)
    d_x[:, 0] += -fx / zz ** 2 * d_jac[:, 0, 2]
    d_x[:, 1] += -fy / zz ** 2 * d_jac[:, 1, 2]
    d_x[:, 2] += (-fx / zz ** 2 * d_jac[:, 0, 0] + 2 * fx * x[:, 0] / zz ** 3 * d_jac[:, 0, 2]
                  - fy / zz ** 2 * d_jac[:, 1, 1] + 2 * fy * x[:, 1] / zz ** 3 * d_jac[:, 1, 2])
    d_x[:, 2] += d_z
    r_cw = cam.pose.rotation.matrix
    d_mu = d_x @ r_cw
    d_cov3 = r_cw.T @ d_m @ r_cw
    d_cov3 = 0.5 * (d_cov3 + np.swapaxes(d_cov3, 1, 2))
    rot = gmap.rotations[proj.idx]
    sc = gmap.scales[proj.idx]
    h_loc = np.swapaxes(rot, 1, 2) @ d_cov3 @ rot
    d_sc = 2.0 * sc * np.einsum("nii->ni", h_loc)
    s2 = sc ** 2
    diff = s2[:, None, :] - s2[:, :, None]  # s_j^2 - s_i^2
    d_rot = np.einsum("nij,kij,nij->nk", h_loc, _SKEW_BASIS, diff)

    out = MapGradients.zeros(len(gmap))
    out.means[proj.idx] = d_mu
    out.rotations[proj.idx] = d_rot
    out.scales[proj.idx] = d_sc
    out.colors[proj.idx] = d_rgb
    out.opacities[proj.idx] = d_op
    return out


# --------------------------------------------------------------------- loss

@dataclass
class LossResult:
    total: float
    photo: float
    ssim: float
    depth: float
    d_color: np.ndarray | None = None
    d_depth: np.ndarray | None = None


def mapping_loss(rendered: RenderOutput, observed_rgb, observed_depth, cfg: MappingConfig | None = None,
                 *, with_grad: bool = False) -> LossResult:
    """``(1 - l_I) L1(color) + l_I (1 - SSIM) + l_D L1(depth over valid pixels)``."""
    cfg = cfg or MappingConfig()
    obs = np.asarray(observed_rgb, float)
    if np.issubdtype(np.asarray(observed_rgb).dtype, np.integer):
        obs = obs / 255.0
    obs_d = np.asarray(observed_depth, float)
    check_same_shape(rendered.color, obs, "rendered and observed color")
    check_same_shape(rendered.depth, obs_d, "rendered and observed depth")
    diff = rendered.color - obs
    photo = float(np.abs(diff).mean())
    if cfg.lambda_i > 0:
        s_val, s_grad = ssim(rendered.color, obs, return_grad=True)
    else:
        s_val, s_grad = 1.0, np.zeros_like(obs)
    valid = np.isfinite(obs_d) & (obs_d > 0)
    n_valid = int(valid.sum())
    ddiff = np.where(valid, rendered.depth - np.where(valid, obs_d, 0.0), 0.0)
    depth_l = float(np.abs(ddiff).sum() / n_valid) if n_valid else 0.0
    total = (1 - cfg.lambda_i) * photo + cfg.lambda_i * (1 - s_val) + cfg.lambda_d * depth_l
    res = LossResult(total, photo, 1 - s_val, depth_l)
    if with_grad:
        res.d_color = (1 - cfg.lambda_i) * np.sign(diff) / diff.size - cfg.lambda_i * s_grad
        res.d_depth = cfg.lambda_d * np.sign(ddiff) / n_valid if n_valid else np.zeros_like(obs_d)
    return res


@dataclass
class Keyframe:
    camera: CameraModel
    rgb: np.ndarray
    depth: np.ndarray
    index: int = 0

    def __post_init__(self):
        rgb = np.asarray(self.rgb)
        self.rgb = rgb / 255.0 if np.issubdtype(rgb.dtype, np.integer) else rgb.astype(float)
        self.depth = np.asarray(self.depth, float)


def keyframe_loss(gmap: GaussianMap, kf: Keyframe, cfg: MappingConfig) -> float:
    out = render(gmap, kf.camera, cfg.render_blur, cfg.alpha_cutoff)
    return mapping_loss(out, kf.rgb, kf.depth, cfg).total


def loss_and_grad(gmap: GaussianMap, kf: Keyframe, cfg: MappingConfig):
    r = _rasterize(gmap, kf.camera, cfg.render_blur, cfg.alpha_cutoff)
    out = _output(r)
    loss = mapping_loss(out, kf.rgb, kf.depth, cfg, with_grad=True)
    # clipping of the displayed color is inactive for valid parameters (sum <= 1)
    grads = _backward(gmap, kf.camera, r, loss.d_color, loss.d_depth)
    return loss, grads


def numerical_gradients(gmap: GaussianMap, kf: Keyframe, cfg: MappingConfig, h: float = 1e-5,
                        groups=("colors", "opacities", "means")) -> dict:
    """Central finite differences of the mapping loss (verification mode)."""
    def loss_of(m):
        return keyframe_loss(m, kf, cfg)

    out = {}
    for name in groups:
        base = getattr(gmap, name)
        g = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            plus, minus = gmap.copy(), gmap.copy()
            getattr(plus, name)[i] += h
            getattr(minus, name)[i] -= h
            g[i] = (loss_of(plus) - loss_of(minus)) / (2 * h)
        out[name] = g
    return out


# -------------------------------------------------------------- map updates

def seed_from_cloud(gmap: GaussianMap, cloud: GaussianCloud, pose: Pose, cfg: MappingConfig | None = None) -> int:
    """Insert one Gaussian per new voxel of ``cloud`` (camera frame) seen from
    ``pose`` (world-from-camera). Returns the number inserted."""
    cfg = cfg or MappingConfig()
    if len(cloud) == 0:
        return 0
    if cloud.colors is None:
        raise MissingColorError("seeding requires a colored cloud")
    world = cloud.transformed(pose)
    keep = voxel_downsample_indices(world.points, cfg.seed_voxel)
    if len(gmap):
        d, _ = cKDTree(gmap.means).query(world.points[keep], k=1)
        keep = keep[d > cfg.seed_voxel]
    if len(keep) == 0:
        return 0
    pts = world.points[keep]
    if len(pts) > 1:
        k = min(4, len(pts))
        d, _ = cKDTree(pts).query(pts, k=k)
        spacing = d[:, 1:].mean(axis=1)
    else:
        spacing = np.full(1, cfg.seed_voxel)
    vals, vecs = np.linalg.eigh(world.covariances[keep])
    vals, vecs = vals[:, ::-1], vecs[:, :, ::-1]
    flip = np.linalg.det(vecs) < 0
    vecs[flip, :, 2] *= -1
    scales = cfg.seed_scale_factor * spacing[:, None] * np.sqrt(np.maximum(vals, 0.0))
    return gmap.append(pts, vecs, scales, world.colors[keep], np.full(len(pts), cfg.opacity_init))


def select_keyframe(current_pose: Pose | None, last_keyframe_pose: Pose | None,
                    cfg: MappingConfig | None = None) -> bool:
    cfg = cfg or MappingConfig()
    if last_keyframe_pose is None:
        return True
    rel = last_keyframe_pose.inverse() @ current_pose
    return bool(np.linalg.norm(rel.translation) > cfg.keyframe_translation
                or rel.rotation.angle() > math.radians(cfg.keyframe_rotation_deg))


def scale_normalization(gmap: GaussianMap, factor: float = 3.0) -> int:
    """Clamp scales to ``[SCALE_MIN, factor * median NN distance]`` where the
    median is taken over the most recently inserted batch."""
    if len(gmap) < 2:
        lo = np.clip(gmap.scales, SCALE_MIN, None)
        changed = int(np.any(lo != gmap.scales, axis=1).sum())
        gmap.scales = lo
        return changed
    recent = np.flatnonzero(gmap.birth == gmap.birth.max())
    if len(recent) < 2:
        recent = np.arange(len(gmap))
    d, _ = cKDTree(gmap.means).query(gmap.means[recent], k=2)
    upper = max(factor * float(np.median(d[:, 1])), SCALE_MIN)
    new = np.clip(gmap.scales, SCALE_MIN, upper)
    changed = int(np.any(new != gmap.scales, axis=1).sum())
    gmap.scales = new
    return changed


def _drop_rounding_noise(g: np.ndarray) -> np.ndarray:
    # Adam rescales by the gradient magnitude, so round-off at an exact
    # optimum would otherwise turn into full-size steps
    return np.where(np.abs(g) < GRAD_FLOOR, 0.0, g)


class _Adam:
    def __init__(self, lrs: dict, b1=0.9, b2=0.999, eps=1e-15):
        self.lrs, self.b1, self.b2, self.eps = lrs, b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, grads: MapGradients) -> dict:
        self.t += 1
        out = {}
        for name, lr in self.lrs.items():
            g = _drop_rounding_noise(getattr(grads, name))
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            out[name] = -lr * mh / (np.sqrt(vh) + self.eps)
        return out


def _apply_step(gmap: GaussianMap, step: dict) -> None:
    gmap.means = gmap.means + step["means"]
    gmap.colors = np.clip(gmap.colors + step["colors"], 0.0, 1.0)
    gmap.opacities = np.clip(gmap.opacities + step["opacities"], 0.0, 1.0)
    gmap.scales = np.clip(gmap.scales + step["scales"], SCALE_MIN, SCALE_MAX)
    gmap.rotations = gmap.rotations @ so3_exp_batch(step["rotations"])


def optimize_map(gmap: GaussianMap, keyframes, cfg: MappingConfig | None = None,
                 iterations: int | None = None, rng: np.random.Generator | None = None,
                 prune: bool = True) -> list[float]:
    """Gradient steps on the mean mapping loss over a keyframe window.

    Returns the loss trace (loss before each step, then the final loss).
    """
    cfg = cfg or MappingConfig()
    keyframes = list(keyframes)
    if not keyframes:
        raise InvalidArgumentError("optimize_map needs at least one keyframe")
    iterations = cfg.iterations_per_keyframe if iterations is None else iterations
    rng = rng or np.random.default_rng(cfg.seed)
    lrs = {"means": cfg.lr_means, "colors": cfg.lr_colors, "opacities": cfg.lr_opacities,
           "scales": cfg.lr_scales, "rotations": cfg.lr_rotations}
    opt = _Adam(lrs) if cfg.optimizer == "adam" else None
    window = list(range(len(keyframes)))
    if len(window) > cfg.keyframe_window:
        # latest keyframe plus a random sample of older ones
        older = rng.choice(len(keyframes) - 1, cfg.keyframe_window - 1, replace=False)
        window = sorted(int(i) for i in older) + [len(keyframes) - 1]
    trace = []
    for _ in range(iterations):
        order = rng.permutation(window)
        total, grads = 0.0, MapGradients.zeros(len(gmap))
        for i in order:
            loss, g = loss_and_grad(gmap, keyframes[i], cfg)
            total += loss.total
            grads += g
        trace.append(total / len(order))
        grads = grads.scaled(1.0 / len(order))
        if opt is not None:
            step = opt.step(grads)
        else:
            step = {k: -lr * getattr(grads, k) for k, lr in lrs.items()}
        _apply_step(gmap, step)
    trace.append(float(np.mean([keyframe_loss(gmap, keyframes[i], cfg) for i in window])))
    if prune:
        gmap.keep(gmap.opacities >= cfg.prune_opacity)
        scale_normalization(gmap, cfg.scale_norm_factor)
    return trace


def keyframe_psnr(gmap: GaussianMap, keyframes, blur: float = 0.3) -> list[float]:
    return [psnr(render(gmap, kf.camera, blur).color, kf.rgb) for kf in keyframes]


class GaussianSplatMap(BaseEstimator):
    """Scikit-learn style wrapper: ``fit`` seeds and optimizes a map from RGB-D
    keyframes with known poses, ``predict`` renders a camera, ``score`` is the
    mean PSNR over keyframes."""

    def __init__(self, lambda_i=0.2, lambda_d=0.5, iterations=100, stride=2, knn_k=10,
                 opacity_init=0.7, prune_opacity=0.05, seed=0):
        self.lambda_i = lambda_i
        self.lambda_d = lambda_d
        self.iterations = iterations
        self.stride = stride
        self.knn_k = knn_k
        self.opacity_init = opacity_init
        self.prune_opacity = prune_opacity
        self.seed = seed

    def _config(self) -> MappingConfig:
        return MappingConfig(lambda_i=self.lambda_i, lambda_d=self.lambda_d,
                             iterations_per_keyframe=max(1, self.iterations),
                             opacity_init=self.opacity_init, prune_opacity=self.prune_opacity,
                             seed=self.seed)

    def fit(self, X, y=None):
        """``X``: iterable of :class:`Keyframe`."""
        cfg = self._config()
        kfs = list(X)
        self.map_ = GaussianMap()
        for kf in kfs:
            intr = kf.camera.intrinsics
            cloud = backproject(kf.depth, intr, kf.rgb, self.stride)
            if len(cloud) > self.knn_k:
                g = estimate_covariances(cloud, self.knn_k)
                seed_from_cloud(self.map_, g, kf.camera.pose.inverse(), cfg)
        self.loss_trace_ = optimize_map(self.map_, kfs, cfg, self.iterations) if self.iterations else []
        return self

    def predict(self, X):
        """Render each camera in ``X`` (a CameraModel or a list of them)."""
        check_is_fitted(self, "map_")
        cams = [X] if isinstance(X, CameraModel) else list(X)
        outs = [render(self.map_, c).color for c in cams]
        return outs[0] if isinstance(X, CameraModel) else outs

    def score(self, X, y=None):
        check_is_fitted(self, "map_")
        return float(np.mean(keyframe_psnr(self.map_, list(X))))
