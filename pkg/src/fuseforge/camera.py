"""Pinhole camera model."""
from dataclasses import dataclass

import numpy as np


class BehindCameraError(ValueError):
    """Raised when a point with z <= 0 is projected."""


class InvalidDepthError(ValueError):
    """Raised when backprojecting a non-positive depth."""


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, level: int) -> "PinholeIntrinsics":
        """Intrinsics of pyramid level `level` (image halved `level` times)."""
        s = 1.0 / (1 << level)
        return PinholeIntrinsics(
            self.fx * s,
            self.fy * s,
            self.cx * s,
            self.cy * s,
            self.width >> level,
            self.height >> level,
        )

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) camera-frame directions with z = 1 for every pixel."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def project(intr: PinholeIntrinsics, point) -> np.ndarray:
    """Project camera-frame point(s) (..., 3) to pixel coordinates (..., 2)."""
    p = np.asarray(point, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point is behind the camera (z <= 0)")
    return np.stack([intr.fx * p[..., 0] / z + intr.cx, intr.fy * p[..., 1] / z + intr.cy], axis=-1)


def backproject(intr: PinholeIntrinsics, pixel, depth) -> np.ndarray:
    """Lift pixel(s) (..., 2) with metric depth(s) to camera-frame points."""
    px = np.asarray(pixel, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(d <= 0):
        raise InvalidDepthError("depth must be positive")
    u, v = px[..., 0], px[..., 1]
    if np.any((u < 0) | (u > intr.width - 1) | (v < 0) | (v > intr.height - 1)):
        raise ValueError("pixel outside image bounds")
    return np.stack([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d], axis=-1)


def depth_to_points(intr: PinholeIntrinsics, depth: np.ndarray) -> np.ndarray:
    """Backproject a whole depth image; invalid (0) pixels map to the origin."""
    return intr.pixel_rays() * depth[..., None]
