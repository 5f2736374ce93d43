"""Surface extraction and synthetic views: volume raycasting, marching cubes,
mesh-to-depth raycasting."""
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .camera import PinholeIntrinsics
from .mc_tables import CORNERS, EDGE_CORNERS, TRI_TABLE
from .se3 import RigidTransform
from .volume import HashedTsdfVolume, _gradient, _trilinear, _trilinear_color, _voxel


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = None
    colors: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.validate()
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.faces)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self):
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("non-finite vertex coordinates")

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(t.apply(self.vertices), self.faces.copy(), t.rotate(self.normals), self.colors)


def vertex_normals(vertices, faces) -> np.ndarray:
    """Area-weighted vertex normals; isolated vertices get +z."""
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=np.int64)
    n = np.zeros_like(v)
    if len(f):
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        for k in range(3):
            np.add.at(n, f[:, k], fn)
    ln = np.linalg.norm(n, axis=1)
    bad = ln == 0
    n[bad] = (0.0, 0.0, 1.0)
    ln[bad] = 1.0
    return n / ln[:, None]


@dataclass
class RenderedView:
    depth: np.ndarray
    normals: np.ndarray
    color: np.ndarray
    pose: RigidTransform
    intr: PinholeIntrinsics
    points: np.ndarray = field(default=None, repr=False)
    face_index: np.ndarray = field(default=None, repr=False)  # mesh renders only, -1 = miss
    barycentric: np.ndarray = field(default=None, repr=False)  # (H, W, 3) weights of face corners

    def __post_init__(self):
        if self.points is None:
            self.points = self.intr.pixel_rays() * self.depth[..., None]

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


# -- volume raycasting ---------------------------------------------------------

@njit(cache=True, parallel=True)
def _raycast_kernel(head, nxt, coords, tsdf, weight, color, vs, tau, rot, trans,
                    fx, fy, cx, cy, width, height, near, far):
    depth = np.zeros((height, width))
    normals = np.zeros((height, width, 3))
    rgb = np.zeros((height, width, 3), np.uint8)
    step = 0.5 * tau
    bext = 8.0 * vs
    for v in prange(height):
        g = np.empty(3)
        c = np.empty(3)
        for u in range(width):
            rx = (u - cx) / fx
            ry = (v - cy) / fy
            rn = np.sqrt(rx * rx + ry * ry + 1.0)
            # unit ray in camera frame; z component converts ray length to depth
            dcx, dcy, dcz = rx / rn, ry / rn, 1.0 / rn
            dwx = rot[0, 0] * dcx + rot[0, 1] * dcy + rot[0, 2] * dcz
            dwy = rot[1, 0] * dcx + rot[1, 1] * dcy + rot[1, 2] * dcz
            dwz = rot[2, 0] * dcx + rot[2, 1] * dcy + rot[2, 2] * dcz
            t = near / dcz
            t_end = far / dcz
            prev = np.nan
            prev_t = t
            while t <= t_end:
                px = trans[0] + t * dwx
                py = trans[1] + t * dwy
                pz = trans[2] + t * dwz
                bi = _find_block_at(head, nxt, coords, vs, px, py, pz)
                if bi < 0:
                    # jump to where the ray leaves this empty block
                    prev = np.nan
                    t_exit = np.inf
                    for p, d in ((px, dwx), (py, dwy), (pz, dwz)):
                        b0 = np.floor(p / bext) * bext
                        if d > 1e-12:
                            t_exit = min(t_exit, (b0 + bext - p) / d)
                        elif d < -1e-12:
                            t_exit = min(t_exit, (b0 - p) / d)
                    t += t_exit + 1e-5 * vs
                    continue
                cur = _trilinear(head, nxt, coords, tsdf, weight, vs, px, py, pz)
                if not np.isnan(cur) and not np.isnan(prev):
                    if prev > 0 and cur < 0:
                        th = prev_t + (t - prev_t) * prev / (prev - cur)
                        hx = trans[0] + th * dwx
                        hy = trans[1] + th * dwy
                        hz = trans[2] + th * dwz
                        depth[v, u] = th * dcz
                        if _gradient(head, nxt, coords, tsdf, weight, vs, hx, hy, hz, g):
                            # world -> camera: rot^T
                            for a in range(3):
                                normals[v, u, a] = rot[0, a] * g[0] + rot[1, a] * g[1] + rot[2, a] * g[2]
                        _trilinear_color(head, nxt, coords, color, vs, hx, hy, hz, c)
                        for a in range(3):
                            rgb[v, u, a] = min(255, max(0, int(np.floor(c[a] + 0.5))))
                        break
                    if prev < 0 and cur > 0:
                        break
                prev = cur
                prev_t = t
                t += step
    return depth, normals, rgb


@njit(cache=True)
def _find_block_at(head, nxt, coords, vs, px, py, pz):
    gx = int(np.floor(px / vs))
    gy = int(np.floor(py / vs))
    gz = int(np.floor(pz / vs))
    i, _ = _voxel(head, nxt, coords, gx, gy, gz)
    return i


def raycast_volume(vol: HashedTsdfVolume, pose: RigidTransform, intr: PinholeIntrinsics,
                   depth_range=(0.1, 5.0)) -> RenderedView:
    """Render depth/normals/color of the TSDF zero crossing seen from `pose`."""
    near, far = depth_range
    if not (near > 0 and far > near):
        raise ValueError("need 0 < near < far")
    depth, normals, rgb = _raycast_kernel(
        vol.head, vol.next, vol.coords, vol.tsdf, vol.weight, vol.color,
        vol.voxel_size, vol.truncation, np.ascontiguousarray(pose.rotation),
        np.ascontiguousarray(pose.translation), intr.fx, intr.fy, intr.cx, intr.cy,
        intr.width, intr.height, float(near), float(far),
    )
    bad = np.linalg.norm(normals, axis=-1) == 0
    depth[bad] = 0.0
    return RenderedView(depth, normals, rgb, pose, intr)


# -- marching cubes -----------------------------------------------------------

@njit(cache=True)
def _mc_kernel(head, nxt, coords, tsdf, weight, color, slots, vs, corners, edge_corners, tri_table, count_only,
               edge_keys, edge_pos, edge_col):
    n_tri = 0
    vals = np.empty(8)
    cols = np.empty((8, 3))
    for s in range(slots.shape[0]):
        b = slots[s]
        for local in range(512):
            gx = coords[b, 0] * 8 + (local & 7)
            gy = coords[b, 1] * 8 + ((local >> 3) & 7)
            gz = coords[b, 2] * 8 + (local >> 6)
            ok = True
            case = 0
            for c in range(8):
                i, li = _voxel(head, nxt, coords, gx + corners[c, 0], gy + corners[c, 1], gz + corners[c, 2])
                if i < 0 or weight[i, li] <= 0:
                    ok = False
                    break
                vals[c] = tsdf[i, li]
                for ch in range(3):
                    cols[c, ch] = color[i, li, ch]
                if vals[c] < 0:
                    case |= 1 << c
            if not ok or case == 0 or case == 255:
                continue
            k = 0
            while tri_table[case, k] >= 0:
                if not count_only:
                    for j in range(3):
                        e = tri_table[case, k + j]
                        c0 = edge_corners[e, 0]
                        c1 = edge_corners[e, 1]
                        # edge key: lower corner index + axis
                        lo = c0
                        if (corners[c1, 0] + corners[c1, 1] + corners[c1, 2]) < (corners[c0, 0] + corners[c0, 1] + corners[c0, 2]):
                            lo = c1
                        axis = 0
                        for a in range(3):
                            if corners[c0, a] != corners[c1, a]:
                                axis = a
                        edge_keys[n_tri, j, 0] = gx + corners[lo, 0]
                        edge_keys[n_tri, j, 1] = gy + corners[lo, 1]
                        edge_keys[n_tri, j, 2] = gz + corners[lo, 2]
                        edge_keys[n_tri, j, 3] = axis
                        v0 = vals[c0]
                        v1 = vals[c1]
                        t = 0.5 if v0 == v1 else v0 / (v0 - v1)
                        for a in range(3):
                            p0 = (gx + corners[c0, a]) if a == 0 else ((gy + corners[c0, a]) if a == 1 else (gz + corners[c0, a]))
                            p1 = (gx + corners[c1, a]) if a == 0 else ((gy + corners[c1, a]) if a == 1 else (gz + corners[c1, a]))
                            edge_pos[n_tri, j, a] = vs * (p0 + t * (p1 - p0))
                            edge_col[n_tri, j, a] = cols[c0, a] + t * (cols[c1, a] - cols[c0, a])
                n_tri += 1
                k += 3
    return n_tri


def marching_cubes(vol: HashedTsdfVolume) -> TriangleMesh:
    """Extract the zero level set as a welded, indexed triangle mesh."""
    n = vol.n_blocks
    order = np.lexsort(vol.coords[:n, ::-1].T) if n else np.zeros(0, np.int64)
    slots = np.ascontiguousarray(order.astype(np.int64))
    args = (vol.head, vol.next, vol.coords, vol.tsdf, vol.weight, vol.color, slots, vol.voxel_size,
            CORNERS, EDGE_CORNERS, TRI_TABLE)
    dummy_k = np.zeros((1, 3, 4), np.int64)
    dummy_p = np.zeros((1, 3, 3))
    n_tri = _mc_kernel(*args, True, dummy_k, dummy_p, dummy_p)
    if n_tri == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3)), np.zeros((0, 3), np.uint8))
    keys = np.zeros((n_tri, 3, 4), np.int64)
    pos = np.zeros((n_tri, 3, 3))
    col = np.zeros((n_tri, 3, 3))
    _mc_kernel(*args, False, keys, pos, col)
    flat_keys = keys.reshape(-1, 4)
    uniq, first, inverse = np.unique(flat_keys, axis=0, return_index=True, return_inverse=True)
    verts = pos.reshape(-1, 3)[first]
    colors = np.clip(np.round(col.reshape(-1, 3)[first]), 0, 255).astype(np.uint8)
    faces = inverse.reshape(-1, 3)
    # table winding is clockwise seen from the positive side; flip to counter-clockwise
    faces = faces[:, ::-1].copy()
    normals = vol.sample_gradient(verts)
    bad = np.any(np.isnan(normals), axis=1)
    if bad.any():
        normals[bad] = vertex_normals(verts, faces)[bad]
    return TriangleMesh(verts, faces, normals, colors)


# -- mesh raycasting ----------------------------------------------------------

@njit(cache=True)
def _mesh_kernel(verts, faces, fx, fy, cx, cy, width, height):
    zbuf = np.full((height, width), np.inf)
    tri = np.full((height, width), -1, np.int64)
    bary = np.zeros((height, width, 2))
    for f in range(faces.shape[0]):
        a = verts[faces[f, 0]]
        b = verts[faces[f, 1]]
        c = verts[faces[f, 2]]
        if a[2] <= 0 and b[2] <= 0 and c[2] <= 0:
            continue
        if a[2] > 0 and b[2] > 0 and c[2] > 0:
            us = np.array([fx * a[0] / a[2] + cx, fx * b[0] / b[2] + cx, fx * c[0] / c[2] + cx])
            vs = np.array([fy * a[1] / a[2] + cy, fy * b[1] / b[2] + cy, fy * c[1] / c[2] + cy])
            u0 = max(0, int(np.floor(us.min())))
            u1 = min(width - 1, int(np.ceil(us.max())))
            v0 = max(0, int(np.floor(vs.min())))
            v1 = min(height - 1, int(np.ceil(vs.max())))
        else:
            u0, u1, v0, v1 = 0, width - 1, 0, height - 1
        e1 = b - a
        e2 = c - a
        for v in range(v0, v1 + 1):
            for u in range(u0, u1 + 1):
                # Moller-Trumbore with origin 0 and direction (x, y, 1): t equals depth
                dx = (u - cx) / fx
                dy = (v - cy) / fy
                px = dy * e2[2] - e2[1]
                py = e2[0] - dx * e2[2]
                pz = dx * e2[1] - dy * e2[0]
                det = e1[0] * px + e1[1] * py + e1[2] * pz
                if abs(det) < 1e-15:
                    continue
                inv = 1.0 / det
                sx, sy, sz = -a[0], -a[1], -a[2]
                bu = (sx * px + sy * py + sz * pz) * inv
                if bu < -1e-12 or bu > 1 + 1e-12:
                    continue
                qx = sy * e1[2] - sz * e1[1]
                qy = sz * e1[0] - sx * e1[2]
                qz = sx * e1[1] - sy * e1[0]
                bv = (dx * qx + dy * qy + qz) * inv
                if bv < -1e-12 or bu + bv > 1 + 1e-12:
                    continue
                t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
                if t > 0 and t < zbuf[v, u]:
                    zbuf[v, u] = t
                    tri[v, u] = f
                    bary[v, u, 0] = bu
                    bary[v, u, 1] = bv
    return zbuf, tri, bary


def raycast_mesh(mesh: TriangleMesh, pose: RigidTransform, intr: PinholeIntrinsics) -> RenderedView:
    """Nearest-hit depth, normals and colors of `mesh` seen from `pose` (camera -> world)."""
    if mesh.n_faces == 0:
        raise ValueError("mesh is empty")
    cam = pose.inverse()
    verts = np.ascontiguousarray(cam.apply(mesh.vertices))
    zbuf, tri, bary = _mesh_kernel(verts, np.ascontiguousarray(mesh.faces), intr.fx, intr.fy, intr.cx,
                                   intr.cy, intr.width, intr.height)
    hit = tri >= 0
    depth = np.where(hit, zbuf, 0.0)
    normals = np.zeros(depth.shape + (3,))
    rgb = np.zeros(depth.shape + (3,), np.uint8)
    if hit.any():
        f = mesh.faces[tri[hit]]
        bu, bv = bary[hit, 0], bary[hit, 1]
        w = np.stack([1 - bu - bv, bu, bv], axis=1)
        n = np.einsum("ij,ijk->ik", w, cam.rotate(mesh.normals)[f])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        normals[hit] = n
        if mesh.colors is not None:
            rgb[hit] = np.clip(np.round(np.einsum("ij,ijk->ik", w, mesh.colors[f].astype(float))), 0, 255)
    weights = np.stack([1 - bary[..., 0] - bary[..., 1], bary[..., 0], bary[..., 1]], axis=-1)
    weights[~hit] = 0.0
    return RenderedView(depth, normals, rgb, pose, intr, face_index=tri, barycentric=weights)
