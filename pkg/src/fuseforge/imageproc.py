"""Per-frame preprocessing: filtering, pyramids, normal maps, intensity, gradients.

Images are plain numpy arrays. Depth images are (H, W) float arrays in meters
with 0 marking an invalid measurement. Normal maps are (H, W, 3) arrays where
an all-zero vector marks an invalid normal.
"""
from dataclasses import dataclass

import numpy as np

from .camera import PinholeIntrinsics, depth_to_points

GAUSS_1D = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
GAUSS_5x5 = np.outer(GAUSS_1D, GAUSS_1D)  # == (1/256) * binomial 5x5, center 36/256


def bilateral_filter(depth: np.ndarray, sigma_spatial: float = 2.0, sigma_range: float = 0.05,
                     radius: int = 3) -> np.ndarray:
    """Edge-preserving depth smoothing; invalid pixels are neither used nor filled."""
    if sigma_spatial <= 0 or sigma_range <= 0:
        raise ValueError("sigmas must be positive")
    d = np.asarray(depth, dtype=float)
    h, w = d.shape
    valid = d > 0
    padded = np.pad(d, radius, mode="constant", constant_values=0.0)
    num = np.zeros_like(d)
    den = np.zeros_like(d)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            nb = padded[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            ws = np.exp(-0.5 * (dx * dx + dy * dy) / sigma_spatial**2)
            wr = np.exp(-0.5 * ((nb - d) / sigma_range) ** 2)
            wgt = np.where(nb > 0, ws * wr, 0.0)
            num += wgt * nb
            den += wgt
    out = np.zeros_like(d)
    out[valid] = num[valid] / den[valid]
    return out


def _sep_convolve(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    r = len(k1d) // 2
    h, w = img.shape
    p = np.pad(img, ((0, 0), (r, r)), mode="edge")
    tmp = sum(k1d[i] * p[:, i:i + w] for i in range(len(k1d)))
    p = np.pad(tmp, ((r, r), (0, 0)), mode="edge")
    return sum(k1d[i] * p[i:i + h, :] for i in range(len(k1d)))


def gaussian_blur(img: np.ndarray, invalid_zero: bool = False) -> np.ndarray:
    """Convolve with the 5x5 binomial kernel, clamp-to-edge borders.

    With ``invalid_zero`` (depth images) zero pixels are excluded from the
    weighted sum, weights renormalized, and zeros stay zero.
    """
    a = np.asarray(img, dtype=float)
    if a.shape[0] < 5 or a.shape[1] < 5:
        raise ValueError("image must be at least 5x5")
    if not invalid_zero:
        return _sep_convolve(a, GAUSS_1D)
    mask = (a > 0).astype(float)
    num = _sep_convolve(a * mask, GAUSS_1D)
    den = _sep_convolve(mask, GAUSS_1D)
    out = np.zeros_like(a)
    ok = mask > 0
    out[ok] = num[ok] / den[ok]
    return out


def intensity_from_rgb(color: np.ndarray) -> np.ndarray:
    c = np.asarray(color, dtype=float)
    return (0.299 * c[..., 0] + 0.587 * c[..., 1] + 0.114 * c[..., 2]) / 255.0


def image_gradient(img: np.ndarray) -> np.ndarray:
    """(H, W, 2) array of (d/du, d/dv); central inside, one-sided at borders."""
    a = np.asarray(img, dtype=float)
    if a.shape[0] < 3 or a.shape[1] < 3:
        raise ValueError("image must be at least 3x3")
    gy, gx = np.gradient(a)
    return np.stack([gx, gy], axis=-1)


def compute_normals(depth: np.ndarray, intr: PinholeIntrinsics, step: int = 1) -> np.ndarray:
    """Per-pixel normals from the cross product of central-difference tangents.

    Normals face the camera; pixels with an invalid or out-of-bounds neighbor
    at +-step get the zero vector.
    """
    if not 1 <= step <= 5:
        raise ValueError("step must be in [1, 5]")
    d = np.asarray(depth, dtype=float)
    h, w = d.shape
    pts = depth_to_points(intr, d)
    valid = d > 0
    normals = np.zeros((h, w, 3))
    s = step
    if h <= 2 * s or w <= 2 * s:
        return normals
    c = (slice(s, h - s), slice(s, w - s))
    du = pts[s:h - s, 2 * s:] - pts[s:h - s, :w - 2 * s]
    dv = pts[2 * s:, s:w - s] - pts[:h - 2 * s, s:w - s]
    ok = (valid[c] & valid[s:h - s, 2 * s:] & valid[s:h - s, :w - 2 * s]
          & valid[2 * s:, s:w - s] & valid[:h - 2 * s, s:w - s])
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 0
    n[ok] /= norm[ok][:, None]
    n[~ok] = 0.0
    flip = np.sum(n * pts[c], axis=-1) > 0
    n[flip] *= -1
    normals[c] = n
    return normals


@dataclass
class PyramidLevel:
    depth: np.ndarray
    intensity: np.ndarray
    normals: np.ndarray
    intr: PinholeIntrinsics


@dataclass
class FramePyramid:
    levels: list

    def __getitem__(self, i) -> PyramidLevel:
        return self.levels[i]

    def __len__(self):
        return len(self.levels)


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h // 2 * 2: 2, : w // 2 * 2: 2]


def build_pyramid(depth: np.ndarray, color: np.ndarray, intr: PinholeIntrinsics, levels: int = 3,
                  normal_step: int = 1, intensity: np.ndarray = None) -> FramePyramid:
    """Smooth-then-subsample pyramid; level 0 is the input at full resolution."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    d = np.asarray(depth, dtype=float)
    gray = intensity_from_rgb(color) if intensity is None else np.asarray(intensity, dtype=float)
    out = []
    for lvl in range(levels):
        li = intr.scaled(lvl)
        if lvl > 0:
            d = _downsample(gaussian_blur(d, invalid_zero=True))
            gray = _downsample(gaussian_blur(gray))
        out.append(PyramidLevel(d, gray, compute_normals(d, li, normal_step), li))
    return FramePyramid(out)
