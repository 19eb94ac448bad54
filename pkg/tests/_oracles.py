"""Independent reference implementations used by the tests.

Nothing here imports the package's integration or rendering code; only the
value types (poses, samples) are shared so results can be compared.
"""
import math

import numpy as np

from vigs.imu import ImuSample
from vigs.se3 import Pose, Rotation


def rodrigues(w):
    w = np.asarray(w, float)
    th = np.linalg.norm(w)
    if th < 1e-12:
        return np.eye(3)
    k = w / th
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(th) * kx + (1 - math.cos(th)) * kx @ kx


class AnalyticTrajectory:
    """Position ``c0 + c1 t + c2 t^2 + c3 t^3 + A sin(f t + phi)`` per axis and
    orientation ``R0 Exp(omega t)``; everything has a closed form."""

    def __init__(self, rng, scale=1.0):
        self.c = rng.normal(size=(4, 3)) * np.array([[1.0], [0.8], [0.4], [0.1]]) * scale
        self.amp = rng.uniform(0.05, 0.3, 3) * scale
        self.freq = rng.uniform(1.0, 4.0, 3)
        self.phase = rng.uniform(0, 2 * math.pi, 3)
        self.r0 = rodrigues(rng.normal(size=3))
        self.omega = rng.normal(size=3) * 0.6

    def position(self, t):
        c = self.c
        return c[0] + c[1] * t + c[2] * t ** 2 + c[3] * t ** 3 + self.amp * np.sin(self.freq * t + self.phase)

    def velocity(self, t):
        c = self.c
        return c[1] + 2 * c[2] * t + 3 * c[3] * t ** 2 + self.amp * self.freq * np.cos(self.freq * t + self.phase)

    def acceleration(self, t):
        return 2 * self.c[2] + 6 * self.c[3] * t - self.amp * self.freq ** 2 * np.sin(self.freq * t + self.phase)

    def rotation(self, t):
        return self.r0 @ rodrigues(self.omega * t)

    def pose(self, t):
        return Pose(Rotation(self.rotation(t)), self.position(t))

    def imu(self, t0, t1, rate=200.0, gravity=(0.0, 0.0, 9.81)):
        g = np.asarray(gravity, float)
        n = int(round((t1 - t0) * rate))
        out = []
        for i in range(n + 1):
            t = t0 + i / rate
            f = self.rotation(t).T @ (self.acceleration(t) + g)
            out.append(ImuSample(t, f, self.omega.copy()))
        return out


def composite(colors, alphas):
    """Front-to-back compositing of already-sorted contributions at one pixel."""
    out, trans = np.zeros(3), 1.0
    for c, a in zip(colors, alphas):
        out += np.asarray(c) * a * trans
        trans *= 1 - a
    return out, 1 - trans


def brute_force_render(means, rotations, scales, colors, opacities, cam, blur=0.3,
                       alpha_max=0.999, alpha_floor=1e-12, near=0.01):
    """Per-pixel direct evaluation: project each Gaussian, sort by depth,
    composite every contribution. No tiling, no culling by footprint."""
    h, w = cam.height, cam.width
    rot, tr = cam.pose.rotation.matrix, cam.pose.translation
    items = []
    for i in range(len(means)):
        x = rot @ means[i] + tr
        if x[2] <= near:
            continue
        jac = np.array([[cam.fx / x[2], 0, -cam.fx * x[0] / x[2] ** 2],
                        [0, cam.fy / x[2], -cam.fy * x[1] / x[2] ** 2]])
        cov3 = rot @ rotations[i] @ np.diag(scales[i] ** 2) @ rotations[i].T @ rot.T
        cov2 = jac @ cov3 @ jac.T + blur * np.eye(2)
        uv = np.array([cam.fx * x[0] / x[2] + cam.cx, cam.fy * x[1] / x[2] + cam.cy])
        items.append((x[2], i, np.linalg.inv(cov2), uv))
    items.sort(key=lambda it: it[0])
    color = np.zeros((h, w, 3))
    opacity = np.zeros((h, w))
    depth = np.zeros((h, w))
    for v in range(h):
        for u in range(w):
            trans = 1.0
            for z, i, prec, uv in items:
                d = np.array([u, v], float) - uv
                a = opacities[i] * math.exp(-0.5 * d @ prec @ d)
                if a < alpha_floor:
                    continue
                a = min(a, alpha_max)
                color[v, u] += colors[i] * a * trans
                depth[v, u] += z * a * trans
                trans *= 1 - a
            opacity[v, u] = 1 - trans
    depth = depth / np.maximum(opacity, 1e-6)
    return color, opacity, depth


def ssim_direct(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Loop-based windowed SSIM over valid window positions, per channel mean."""
    a = np.atleast_3d(np.asarray(a, float))
    b = np.atleast_3d(np.asarray(b, float))
    ax = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-ax ** 2 / (2 * sigma ** 2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        for i in range(x.shape[0] - size + 1):
            for j in range(x.shape[1] - size + 1):
                px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
                mx, my = (win * px).sum(), (win * py).sum()
                vx = (win * px * px).sum() - mx * mx
                vy = (win * py * py).sum() - my * my
                cxy = (win * px * py).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))
