"""Trajectory and image quality metrics: ATE RMSE, PSNR, SSIM."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import check_same_shape
from .errors import InsufficientOverlapError, InvalidArgumentError, OrderingError
from .se3 import Pose, Rotation

PSNR_CAP = 100.0
ASSOCIATION_WINDOW = 0.02
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise InvalidArgumentError("timestamps and poses differ in length")
        if len(self.timestamps) and np.any(np.diff(self.timestamps) <= 0):
            raise OrderingError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())

    def to_tum_lines(self) -> list[str]:
        out = []
        for t, p in zip(self.timestamps, self.poses):
            out.append(f"{t:.6f} " + " ".join(f"{v:.6f}" for v in p.to_tum()))
        return out

    def save_tum(self, path) -> None:
        Path(path).write_text("\n".join(self.to_tum_lines()) + "\n")

    @classmethod
    def load_tum(cls, path) -> "Trajectory":
        ts, poses = [], []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.replace(",", " ").split()]
            if len(vals) != 8:
                raise InvalidArgumentError(f"{path}: expected 8 values per line, got {len(vals)}")
            ts.append(vals[0])
            poses.append(Pose.from_tum(vals[1:]))
        return cls(np.array(ts), poses)


def associate(est: Trajectory, ref: Trajectory, max_diff: float = ASSOCIATION_WINDOW):
    """One-to-one nearest-timestamp matching, greedy by time difference."""
    if len(est) == 0 or len(ref) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    j = np.clip(np.searchsorted(ref.timestamps, est.timestamps), 1, len(ref) - 1) if len(ref) > 1 \
        else np.zeros(len(est), int)
    cands = []
    for i, jj in enumerate(j):
        for k in (jj - 1, jj):
            if 0 <= k < len(ref):
                dt = abs(est.timestamps[i] - ref.timestamps[k])
                if dt <= max_diff:
                    cands.append((dt, i, k))
    cands.sort()
    used_i, used_k, pairs = set(), set(), []
    for _, i, k in cands:
        if i not in used_i and k not in used_k:
            used_i.add(i)
            used_k.add(k)
            pairs.append((i, k))
    pairs.sort()
    if not pairs:
        return np.zeros(0, int), np.zeros(0, int)
    a = np.array(pairs)
    return a[:, 0], a[:, 1]


def umeyama_rigid(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid transform (no scale) minimizing ``sum |dst - (R src + t)|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1
    r = u @ s @ vt
    return Pose(Rotation.from_matrix(r), mu_d - r @ mu_s)


def ate_rmse(estimated: Trajectory, reference: Trajectory, align: bool = True,
             max_diff: float = ASSOCIATION_WINDOW) -> tuple[float, Pose]:
    """Translational RMSE after (optional) rigid alignment of est onto ref."""
    ie, ir = associate(estimated, reference, max_diff)
    if len(ie) < 3:
        raise InsufficientOverlapError(f"only {len(ie)} associated poses (need >= 3)")
    pe = estimated.positions[ie]
    pr = reference.positions[ir]
    alignment = umeyama_rigid(pe, pr) if align else Pose.identity()
    res = pr - alignment.transform_points(pe)
    return float(math.sqrt(np.mean(np.sum(res ** 2, axis=1)))), alignment


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return ``PSNR_CAP``."""
    check_same_shape(a, b)
    if not peak > 0:
        raise InvalidArgumentError("peak must be positive")
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    y = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(y, len(g), axis=1) @ g


def _filter_valid_adjoint(y: np.ndarray, g: np.ndarray, shape) -> np.ndarray:
    n = len(g)
    tmp = np.zeros((y.shape[0], shape[1]) + y.shape[2:])
    for i in range(n):
        tmp[:, i:i + y.shape[1]] += g[i] * y
    out = np.zeros(shape)
    for i in range(n):
        out[i:i + y.shape[0]] += g[i] * tmp
    return out


def ssim(a, b, *, data_range: float = 1.0, return_grad: bool = False):
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Multichannel images (H, W, C) are scored per channel and averaged. With
    ``return_grad`` the gradient with respect to ``a`` is returned as well.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    check_same_shape(a, b)
    if a.ndim not in (2, 3):
        raise InvalidArgumentError(f"SSIM expects HxW or HxWxC images, got {a.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise InvalidArgumentError(f"images must be at least {SSIM_WINDOW}px on each side")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a ** 2
    s_bb = _filter_valid(b * b, g) - mu_b ** 2
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num1, num2 = 2 * mu_a * mu_b + c1, 2 * s_ab + c2
    den1, den2 = mu_a ** 2 + mu_b ** 2 + c1, s_aa + s_bb + c2
    smap = num1 * num2 / (den1 * den2)
    value = float(smap.mean())
    if not return_grad:
        return value
    scale = 1.0 / smap.size
    d_mu = (2 * mu_b * num2 / (den1 * den2) - smap * 2 * mu_a / den1) * scale
    d_saa = -smap / den2 * scale
    d_sab = 2 * num1 / (den1 * den2) * scale
    coef_mu = d_mu - 2 * mu_a * d_saa - mu_b * d_sab
    grad = (_filter_valid_adjoint(coef_mu, g, a.shape)
            + 2 * a * _filter_valid_adjoint(d_saa, g, a.shape)
            + b * _filter_valid_adjoint(d_sab, g, a.shape))
    return value, grad


@dataclass
class MetricsReport:
    ate_rmse: float | None = None
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    frame_count: int = 0
    runtime: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def psnr_mean(self):
        return float(np.mean(self.psnr)) if self.psnr else None

    @property
    def ssim_mean(self):
        return float(np.mean(self.ssim)) if self.ssim else None

    def items(self) -> list[tuple[str, object]]:
        out = [("frame_count", self.frame_count)]
        if self.ate_rmse is not None:
            out.append(("ate_rmse", self.ate_rmse))
        if self.psnr:
            out.append(("psnr_mean", self.psnr_mean))
            out.append(("ssim_mean", self.ssim_mean))
            out += [(f"psnr.{i}", v) for i, v in enumerate(self.psnr)]
            out += [(f"ssim.{i}", v) for i, v in enumerate(self.ssim)]
        out += sorted(self.extra.items())
        out += [(f"runtime.{k}", v) for k, v in sorted(self.runtime.items())]
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.items():
            lines.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())
