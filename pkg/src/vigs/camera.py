"""Pinhole camera types shared by tracking, mapping and dataset I/O."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .se3 import Pose


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("image size must be at least 1x1")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``factor`` (pixel-center aligned)."""
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor,
            (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5,
            max(1, int(round(self.width * factor))), max(1, int(round(self.height * factor))))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics plus a camera-from-world pose for rendering."""

    intrinsics: CameraIntrinsics
    pose: Pose = field(default_factory=Pose.identity)

    @classmethod
    def from_world_pose(cls, intrinsics: CameraIntrinsics, world_from_cam: Pose) -> "CameraModel":
        return cls(intrinsics, world_from_cam.inverse())

    @property
    def fx(self):
        return self.intrinsics.fx

    @property
    def fy(self):
        return self.intrinsics.fy

    @property
    def cx(self):
        return self.intrinsics.cx

    @property
    def cy(self):
        return self.intrinsics.cy

    @property
    def width(self):
        return self.intrinsics.width

    @property
    def height(self):
        return self.intrinsics.height


def pixel_grid(height: int, width: int, stride: int = 1):
    v, u = np.mgrid[0:height:stride, 0:width:stride]
    return u.astype(float), v.astype(float)
