"""Rotations, rigid transforms and the small-matrix operators built on them.

Conventions
-----------
* Quaternions are stored vector-first: ``(qx, qy, qz, qw)``. This is also the
  order used by the TUM trajectory format.
* A :class:`Pose` ``T_ab`` maps points from frame ``b`` to frame ``a``:
  ``p_a = R_ab @ p_b + t_ab``. ``compose(T_ab, T_bc) == T_ac``.
* Rotations are kept orthonormal by projecting onto SO(3) every
  ``RENORMALIZE_EVERY`` compositions, or sooner when the orthonormality error
  exceeds ``RENORMALIZE_TOL``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

RENORMALIZE_EVERY = 100
RENORMALIZE_TOL = 1e-10
_SMALL_ANGLE = 1e-8


def _as_vec3(v, name="vector"):
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise InvalidArgumentError(f"{name} must have 3 components, got shape {np.shape(v)}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} has non-finite components: {a}")
    return a


def skew(omega) -> np.ndarray:
    """Cross-product matrix: ``skew(w) @ v == np.cross(w, v)``."""
    x, y, z = _as_vec3(omega, "omega")
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def omega_matrix(omega) -> np.ndarray:
    """4x4 quaternion-rate matrix for a vector-first quaternion.

    ``[[-skew(w), w], [-w^T, 0]]`` so that ``dq/dt = 0.5 * omega_matrix(w) @ q``.
    """
    w = _as_vec3(omega, "omega")
    out = np.zeros((4, 4))
    out[:3, :3] = -skew(w)
    out[:3, 3] = w
    out[3, :3] = -w
    return out


def orthonormality_error(m: np.ndarray) -> float:
    return float(np.max(np.abs(m.T @ m - np.eye(3))))


def _project_so3(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True, eq=False)
class Rotation:
    """Element of SO(3), backed by a 3x3 matrix."""

    matrix: np.ndarray
    _age: int = field(default=0, repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise InvalidArgumentError(f"rotation matrix must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidArgumentError("rotation matrix has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_matrix(cls, m, *, check: bool = True) -> "Rotation":
        m = np.asarray(m, dtype=float)
        if check:
            if orthonormality_error(m) > 1e-6 or np.linalg.det(m) < 0:
                raise InvalidArgumentError("matrix is not a proper rotation")
            if orthonormality_error(m) > RENORMALIZE_TOL:
                m = _project_so3(m)
        return cls(m)

    @classmethod
    def from_quat(cls, q) -> "Rotation":
        """From a vector-first quaternion ``(x, y, z, w)``; normalized on input."""
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise InvalidArgumentError(f"quaternion must be 4 finite values, got {q}")
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise InvalidArgumentError("zero-norm quaternion")
        x, y, z, w = q / n
        return cls(np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]))

    def as_matrix(self) -> np.ndarray:
        return self.matrix

    def as_quat(self) -> np.ndarray:
        """Vector-first unit quaternion with non-negative scalar part."""
        m = self.matrix
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s]
        q = np.array(q)
        q /= np.linalg.norm(q)
        if q[3] < 0:
            q = -q
        return q

    def inv(self) -> "Rotation":
        return Rotation(self.matrix.T, self._age)

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            m = self.matrix @ other.matrix
            age = self._age + other._age + 1
            if age >= RENORMALIZE_EVERY or orthonormality_error(m) > RENORMALIZE_TOL:
                m, age = _project_so3(m), 0
            return Rotation(m, age)
        return self.matrix @ np.asarray(other, dtype=float)

    def apply(self, v) -> np.ndarray:
        """Rotate one vector (shape (3,)) or many (shape (N, 3))."""
        v = np.asarray(v, dtype=float)
        return v @ self.matrix.T

    def angle(self) -> float:
        return float(np.linalg.norm(so3_log(self)))

    def __repr__(self):
        return f"Rotation(quat_xyzw={np.round(self.as_quat(), 9).tolist()})"


def so3_exp(omega) -> Rotation:
    """Axis-angle vector (rad) to rotation via Rodrigues' formula."""
    w = _as_vec3(omega, "omega")
    theta2 = float(w @ w)
    k = skew(w)
    if theta2 < _SMALL_ANGLE ** 2:
        # second-order Taylor expansion
        m = np.eye(3) + k + 0.5 * (k @ k)
        return Rotation(_project_so3(m))
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return Rotation(np.eye(3) + a * k + b * (k @ k))


def so3_log(r: Rotation) -> np.ndarray:
    """Inverse of :func:`so3_exp`; result has norm in ``[0, pi]``.

    At exactly ``pi`` the axis is chosen with a non-negative first nonzero
    component.
    """
    m = r.matrix if isinstance(r, Rotation) else np.asarray(r, dtype=float)
    cos_t = min(1.0, max(-1.0, 0.5 * (np.trace(m) - 1.0)))
    vee = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    if cos_t > 1.0 - 1e-12:
        # theta ~ 0: log(R) ~ (R - R^T)/2 with a cubic correction
        return 0.5 * vee * (1.0 + (1.0 - cos_t) / 3.0)
    theta = math.acos(cos_t)
    if theta < math.pi - 1e-6:
        return theta / (2.0 * math.sin(theta)) * vee
    # near pi: axis from the symmetric part, sign from the antisymmetric part
    s = 0.5 * (m + m.T) - cos_t * np.eye(3)
    col = int(np.argmax(np.diag(s)))
    axis = s[:, col] / math.sqrt(max(s[col, col], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, vee) < 0:
        axis = -axis
    if abs(np.dot(axis, vee)) < 1e-9:
        nz = axis[np.abs(axis) > 1e-12]
        if nz.size and nz[0] < 0:
            axis = -axis
    # refine theta with atan2 for accuracy near pi
    theta = math.atan2(0.5 * abs(np.dot(axis, vee)), cos_t)
    return theta * axis


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``T_ab``: rotation plus translation in meters."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not isinstance(self.rotation, Rotation):
            object.__setattr__(self, "rotation", Rotation.from_matrix(self.rotation))
        t = _as_vec3(self.translation, "translation").copy()
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise InvalidArgumentError(f"pose matrix must be 4x4, got {m.shape}")
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_tum(cls, values) -> "Pose":
        """From ``tx ty tz qx qy qz qw``."""
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.shape != (7,):
            raise InvalidArgumentError(f"expected 7 pose values, got {v.size}")
        return cls(Rotation.from_quat(v[3:]), v[:3])

    @classmethod
    def exp(cls, xi) -> "Pose":
        """Pose from a 6-vector ``(rotation, translation)``; translation is not
        coupled through the SE(3) left Jacobian (used only for small updates)."""
        xi = np.asarray(xi, dtype=float)
        return cls(so3_exp(xi[:3]), xi[3:])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    def to_tum(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation.as_quat()])

    def inverse(self) -> "Pose":
        rt = self.rotation.inv()
        return Pose(rt, -(rt.matrix @ self.translation))

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose(self.rotation @ other.rotation,
                        self.rotation.matrix @ other.translation + self.translation)
        return self.transform_points(other)

    def transform_points(self, pts) -> np.ndarray:
        """Apply to one point (3,) or an array (N, 3)."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.matrix.T + self.translation

    def __repr__(self):
        return f"Pose(t={np.round(self.translation, 9).tolist()}, {self.rotation!r})"


def compose(a: Pose, b: Pose) -> Pose:
    return a @ b


def inverse(a: Pose) -> Pose:
    return a.inverse()


def transform_point(a: Pose, p) -> np.ndarray:
    return a.transform_points(_as_vec3(p, "point"))


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation (m) and rotation (rad) magnitudes of ``a^-1 b``."""
    d = a.inverse() @ b
    return float(np.linalg.norm(d.translation)), d.rotation.angle()


def check_covariance(sigma, *, tol: float = 1e-9, name: str = "covariance") -> np.ndarray:
    s = np.asarray(sigma, dtype=float)
    if s.shape != (3, 3) or not np.all(np.isfinite(s)):
        raise InvalidArgumentError(f"{name} must be a finite 3x3 matrix")
    if np.max(np.abs(s - s.T)) > tol * max(1.0, np.max(np.abs(s))):
        raise InvalidArgumentError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(0.5 * (s + s.T)).min() < -1e-12 * max(1.0, np.max(np.abs(s))):
        raise InvalidArgumentError(f"{name} is not positive semi-definite")
    return s


def transport_covariance(t: Pose, sigma) -> np.ndarray:
    """Express a point covariance in the frame ``t`` maps into: ``R S R^T``."""
    s = check_covariance(sigma)
    r = t.rotation.matrix
    out = r @ s @ r.T
    return 0.5 * (out + out.T)


def so3_exp_batch(omega: np.ndarray) -> np.ndarray:
    """Rodrigues for an (N, 3) array of axis-angle vectors -> (N, 3, 3)."""
    w = np.asarray(omega, dtype=float).reshape(-1, 3)
    theta2 = np.einsum("ni,ni->n", w, w)
    theta = np.sqrt(theta2)
    small = theta2 < _SMALL_ANGLE ** 2
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    k = np.zeros((len(w), 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -w[:, 2], w[:, 1]
    k[:, 1, 0], k[:, 1, 2] = w[:, 2], -w[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -w[:, 1], w[:, 0]
    return np.eye(3) + a[:, None, None] * k + b[:, None, None] * (k @ k)
