"""Analytic test content: sphere-traced SDF scenes, a grid plane mesh and
closed-form deformations of it."""
from dataclasses import dataclass

import numpy as np

from .camera import PinholeIntrinsics
from .se3 import RigidTransform
from .surface import RenderedView, TriangleMesh, vertex_normals


@dataclass(frozen=True)
class SdfPlane:
    """Plane n.x = offset; the side the normal points to is free space."""
    normal: tuple = (0.0, 0.0, -1.0)
    offset: float = -1.0  # signed distance of the plane along `normal`

    def sdf(self, p):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        return p @ n - self.offset


@dataclass(frozen=True)
class SdfSphere:
    center: tuple = (0.0, 0.0, 2.0)
    radius: float = 0.5

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center, float), axis=-1) - self.radius


def scene_sdf(shapes, p):
    return np.min([s.sdf(p) for s in shapes], axis=0)


def smooth_texture(p, scale: float = 12.0) -> np.ndarray:
    """Smooth procedural RGB texture in world coordinates, uint8."""
    a = np.sin(scale * p[..., 0]) * np.sin(scale * p[..., 1]) + np.sin(0.7 * scale * p[..., 2])
    b = np.cos(0.8 * scale * (p[..., 0] + p[..., 2])) * np.cos(0.6 * scale * p[..., 1])
    r = 128 + 60 * a
    g = 128 + 50 * b + 20 * a
    bl = 128 - 40 * a + 30 * b
    return np.clip(np.stack([r, g, bl], axis=-1), 0, 255).round().astype(np.uint8)


def render_synthetic_scene(shapes, pose: RigidTransform, intr: PinholeIntrinsics, with_color: bool = False,
                           max_depth: float = 10.0, tol: float = 1e-9, max_steps: int = 512,
                           texture=smooth_texture):
    """Sphere-trace the union of analytic SDFs; returns depth (0 = miss) and
    optionally an RGB image shaded by `texture`."""
    if not shapes:
        raise ValueError("need at least one shape")
    rays = intr.pixel_rays().reshape(-1, 3)
    dirs_c = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    dirs = pose.rotate(dirs_c)
    origin = np.asarray(pose.translation, float)
    t = np.zeros(len(dirs))
    active = np.ones(len(dirs), bool)
    hit = np.zeros(len(dirs), bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        d = scene_sdf(shapes, origin + t[idx, None] * dirs[idx])
        t[idx] += d
        done = np.abs(d) < tol
        hit[idx[done]] = True
        gone = (t[idx] > max_depth * np.linalg.norm(rays[idx], axis=1)) | (t[idx] < 0)
        active[idx[done | gone]] = False
    depth = np.where(hit, t * dirs_c[:, 2], 0.0)
    depth = np.where(depth > max_depth, 0.0, depth).reshape(intr.height, intr.width)
    if not with_color:
        return depth
    pts = origin + t[:, None] * dirs
    color = np.where(hit[:, None], texture(pts), 0).astype(np.uint8)
    return depth, color.reshape(intr.height, intr.width, 3)


def scene_normals(shapes, p, h: float = 1e-6) -> np.ndarray:
    """Unit SDF gradient by central differences."""
    g = np.stack([scene_sdf(shapes, p + h * e) - scene_sdf(shapes, p - h * e) for e in np.eye(3)], axis=-1)
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-300)


def render_synthetic_view(shapes, pose: RigidTransform, intr: PinholeIntrinsics, **kw) -> RenderedView:
    """Model prediction straight from the analytic scene (normals in the
    camera frame), usable as a tracker model source."""
    depth, color = render_synthetic_scene(shapes, pose, intr, with_color=True, **kw)
    rays = intr.pixel_rays()
    pts_w = pose.apply(rays * depth[..., None])
    n = pose.inverse().rotate(scene_normals(shapes, pts_w.reshape(-1, 3))).reshape(depth.shape + (3,))
    n[depth <= 0] = 0.0
    return RenderedView(depth, n, color, pose, intr)


def generate_synthetic_plane(rows: int = 21, cols: int = 13, extent=1.0) -> TriangleMesh:
    """Regular grid in z = 0 centred on the origin; `extent` is the (x, y)
    size, a scalar meaning a square. Normals are +z."""
    if rows < 2 or cols < 2:
        raise ValueError("rows and cols must be >= 2")
    ex, ey = (extent, extent) if np.isscalar(extent) else extent
    xs = np.linspace(-ex / 2, ex / 2, cols)
    ys = np.linspace(-ey / 2, ey / 2, rows)
    gx, gy = np.meshgrid(xs, ys)
    verts = np.stack([gx.ravel(), gy.ravel(), np.zeros(rows * cols)], axis=1)
    idx = np.arange(rows * cols).reshape(rows, cols)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    normals = np.tile([0.0, 0.0, 1.0], (len(verts), 1))
    return TriangleMesh(verts, faces.astype(np.int64), normals)


DEFORMATIONS = ("sinusoid", "bend", "fold", "twist")


def _roll_radius(half: float, a: float) -> float:
    """Radius R with R (1 - cos(half / R)) = |a|, via bisection on the curvature."""
    lo, hi = 1e-12, np.pi / half  # curvature; hi folds the edge straight up
    if abs(a) >= half:
        raise ValueError("bend amplitude must be smaller than the half extent")
    for _ in range(200):
        k = 0.5 * (lo + hi)
        if (1 - np.cos(half * k)) / k < abs(a):
            lo = k
        else:
            hi = k
    return 1.0 / (0.5 * (lo + hi))


def apply_synthetic_deformation(mesh: TriangleMesh, kind: str, amplitude: float, seed: int = 0,
                                noise: float = 0.0) -> TriangleMesh:
    """Closed-form deformation of a z = 0 plane mesh centred on the origin.

    sinusoid: z += a sin(pi x / hx), one period across the x extent.
    bend: isometric roll onto a cylinder about an axis parallel to y.
    fold: isometric crease along x = 0, both halves lifted rigidly.
    twist: z += a (x / hx)(y / hy).
    In every case the largest |dz| equals |a|. `seed` drives optional
    Gaussian z noise of std `noise`.
    """
    if not np.isfinite(amplitude):
        raise ValueError("amplitude must be finite")
    v = mesh.vertices.copy()
    half = np.maximum(np.abs(v[:, :2]).max(axis=0), 1e-12)
    x, y = v[:, 0].copy(), v[:, 1].copy()
    a = float(amplitude)
    if kind == "sinusoid":
        v[:, 2] += a * np.sin(np.pi * x / half[0])
    elif kind == "bend":
        if a != 0:
            r = _roll_radius(half[0], a)
            v[:, 0] = r * np.sin(x / r)
            v[:, 2] += np.sign(a) * r * (1 - np.cos(x / r))
    elif kind == "fold":
        theta = np.arcsin(np.clip(a / half[0], -1, 1))
        v[:, 0] = x * np.cos(theta)
        v[:, 2] += np.abs(x) * np.sin(theta)
    elif kind == "twist":
        v[:, 2] += a * (x / half[0]) * (y / half[1])
    else:
        raise ValueError(f"unknown deformation {kind!r}")
    if noise > 0:
        v[:, 2] += np.random.default_rng(seed).normal(0.0, noise, len(v))
    return TriangleMesh(v, mesh.faces.copy(), vertex_normals(v, mesh.faces))


DEFAULT_SCENE = (SdfPlane((0, 0, -1), -2.5), SdfPlane((0, -1, 0), -0.6),
                 SdfSphere((-0.4, 0.1, 1.8), 0.3), SdfSphere((0.5, -0.2, 2.0), 0.35),
                 SdfSphere((0.1, 0.3, 1.4), 0.2))


def handheld_trajectory(n: int, fps: float = 30.0, amplitude: float = 0.1, degrees: float = 3.0,
                        t0: float = 0.0):
    """Smooth back-and-forth camera motion: Lissajous translation of about
    `amplitude` meters and a few degrees of wobble. Returns (timestamps, poses)."""
    from .se3 import twist_to_transform
    ts = t0 + np.arange(n) / fps
    s = 2 * np.pi * np.arange(n) / max(n, 1)
    a = np.radians(degrees)
    poses = []
    for u in s:
        xi = [a * np.sin(u), a * np.sin(2 * u + 0.5), 0.5 * a * np.sin(u + 1.0),
              amplitude * np.sin(u), 0.5 * amplitude * np.sin(2 * u), 0.5 * amplitude * (1 - np.cos(u))]
        poses.append(twist_to_transform(xi))
    return ts, poses


def write_synthetic_sequence(root, intr: PinholeIntrinsics, n: int = 30, shapes=DEFAULT_SCENE,
                             noise: float = 0.0, seed: int = 0, **motion):
    """Render a TUM-format sequence (depth, color, groundtruth.txt) of an
    analytic scene. `noise` is the depth noise std at 1 m, growing with z^2."""
    from .datasets import write_tum_sequence
    ts, poses = handheld_trajectory(n, **motion)
    rng = np.random.default_rng(seed)
    depths, colors = [], []
    for p in poses:
        d, c = render_synthetic_scene(list(shapes), p, intr, with_color=True)
        if noise > 0:
            d = np.where(d > 0, d + rng.normal(0.0, noise, d.shape) * d * d, 0.0)
        depths.append(d)
        colors.append(c)
    write_tum_sequence(root, ts, depths, colors, poses)
    return ts, poses
