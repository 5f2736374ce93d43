"""Sparse block-hashed TSDF volume.

Voxel with integer index g sits at world position g * voxel_size and belongs
to block floor(g / 8). Blocks live in a growable pool; a chained hash table
(`head` per bucket, `next` per block) maps block coordinates to pool slots.
"""
from dataclasses import dataclass
import struct

import numpy as np
from numba import njit, prange

from .camera import PinholeIntrinsics
from .imageproc import compute_normals
from .se3 import RigidTransform

BLOCK = 8
BLOCK_VOXELS = BLOCK**3
_P1, _P2, _P3 = 73856093, 19349669, 83492791
_MASK32 = 0xFFFFFFFF


def block_hash(coord, table_size: int) -> int:
    """Spatial hash of a block coordinate on 32-bit unsigned arithmetic."""
    if table_size <= 0:
        raise ValueError("table_size must be positive")
    x, y, z = (int(c) for c in coord)
    h = ((x * _P1) & _MASK32) ^ ((y * _P2) & _MASK32) ^ ((z * _P3) & _MASK32)
    return h % table_size


@njit(cache=True)
def _hash(x, y, z, table_size):
    h = ((x * 73856093) & 0xFFFFFFFF) ^ ((y * 19349669) & 0xFFFFFFFF) ^ ((z * 83492791) & 0xFFFFFFFF)
    return h % table_size


@njit(cache=True)
def _find(head, nxt, coords, bx, by, bz):
    i = head[_hash(bx, by, bz, head.shape[0])]
    while i >= 0:
        if coords[i, 0] == bx and coords[i, 1] == by and coords[i, 2] == bz:
            return i
        i = nxt[i]
    return -1


@njit(cache=True)
def _find_many(head, nxt, coords, query):
    out = np.empty(query.shape[0], np.int64)
    for k in range(query.shape[0]):
        out[k] = _find(head, nxt, coords, query[k, 0], query[k, 1], query[k, 2])
    return out


@njit(cache=True)
def _insert_many(head, nxt, coords, query, n_blocks):
    """Insert missing blocks (pool must have room); returns slots and new count."""
    out = np.empty(query.shape[0], np.int64)
    for k in range(query.shape[0]):
        bx, by, bz = query[k, 0], query[k, 1], query[k, 2]
        i = _find(head, nxt, coords, bx, by, bz)
        if i < 0:
            i = n_blocks
            n_blocks += 1
            coords[i, 0] = bx
            coords[i, 1] = by
            coords[i, 2] = bz
            b = _hash(bx, by, bz, head.shape[0])
            nxt[i] = head[b]
            head[b] = i
        out[k] = i
    return out, n_blocks


@njit(cache=True)
def _voxel(head, nxt, coords, gx, gy, gz):
    """(slot, local index) of global voxel g, slot = -1 if unallocated."""
    bx, by, bz = gx >> 3, gy >> 3, gz >> 3
    i = _find(head, nxt, coords, bx, by, bz)
    local = ((gz & 7) * 8 + (gy & 7)) * 8 + (gx & 7)
    return i, local


@njit(cache=True)
def _trilinear(head, nxt, coords, tsdf, weight, vs, px, py, pz):
    fx, fy, fz = px / vs, py / vs, pz / vs
    x0, y0, z0 = int(np.floor(fx)), int(np.floor(fy)), int(np.floor(fz))
    tx, ty, tz = fx - x0, fy - y0, fz - z0
    acc = 0.0
    if (x0 & 7) != 7 and (y0 & 7) != 7 and (z0 & 7) != 7:
        # all eight corners share one block: a single hash lookup
        i = _find(head, nxt, coords, x0 >> 3, y0 >> 3, z0 >> 3)
        if i < 0:
            return np.nan
        base = ((z0 & 7) * 8 + (y0 & 7)) * 8 + (x0 & 7)
        for c in range(8):
            dx, dy, dz = c & 1, (c >> 1) & 1, (c >> 2) & 1
            local = base + dz * 64 + dy * 8 + dx
            if weight[i, local] <= 0:
                return np.nan
            wx = tx if dx else 1.0 - tx
            wy = ty if dy else 1.0 - ty
            wz = tz if dz else 1.0 - tz
            acc += wx * wy * wz * tsdf[i, local]
        return acc
    for c in range(8):
        dx, dy, dz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        i, local = _voxel(head, nxt, coords, x0 + dx, y0 + dy, z0 + dz)
        if i < 0 or weight[i, local] <= 0:
            return np.nan
        wx = tx if dx else 1.0 - tx
        wy = ty if dy else 1.0 - ty
        wz = tz if dz else 1.0 - tz
        acc += wx * wy * wz * tsdf[i, local]
    return acc


@njit(cache=True)
def _trilinear_color(head, nxt, coords, color, vs, px, py, pz, out):
    fx, fy, fz = px / vs, py / vs, pz / vs
    x0, y0, z0 = int(np.floor(fx)), int(np.floor(fy)), int(np.floor(fz))
    tx, ty, tz = fx - x0, fy - y0, fz - z0
    out[:] = 0.0
    for c in range(8):
        dx, dy, dz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        i, local = _voxel(head, nxt, coords, x0 + dx, y0 + dy, z0 + dz)
        if i < 0:
            continue
        w = (tx if dx else 1.0 - tx) * (ty if dy else 1.0 - ty) * (tz if dz else 1.0 - tz)
        for ch in range(3):
            out[ch] += w * color[i, local, ch]


@njit(cache=True)
def _gradient(head, nxt, coords, tsdf, weight, vs, px, py, pz, out):
    """Unit central-difference gradient into `out`; False if unobserved."""
    for a in range(3):
        hi_p = [px, py, pz]
        lo_p = [px, py, pz]
        hi_p[a] += vs
        lo_p[a] -= vs
        hi = _trilinear(head, nxt, coords, tsdf, weight, vs, hi_p[0], hi_p[1], hi_p[2])
        lo = _trilinear(head, nxt, coords, tsdf, weight, vs, lo_p[0], lo_p[1], lo_p[2])
        if np.isnan(hi) or np.isnan(lo):
            return False
        out[a] = hi - lo
    n = np.sqrt(out[0] ** 2 + out[1] ** 2 + out[2] ** 2)
    if n == 0.0:
        return False
    out /= n
    return True


@njit(cache=True)
def _sample_many(head, nxt, coords, tsdf, weight, vs, pts):
    out = np.empty(pts.shape[0])
    for k in range(pts.shape[0]):
        out[k] = _trilinear(head, nxt, coords, tsdf, weight, vs, pts[k, 0], pts[k, 1], pts[k, 2])
    return out


@njit(cache=True)
def _gradient_many(head, nxt, coords, tsdf, weight, vs, pts):
    out = np.full((pts.shape[0], 3), np.nan)
    g = np.empty(3)
    for k in range(pts.shape[0]):
        if _gradient(head, nxt, coords, tsdf, weight, vs, pts[k, 0], pts[k, 1], pts[k, 2], g):
            out[k] = g
    return out


@njit(cache=True)
def _color_many(head, nxt, coords, color, vs, pts):
    out = np.empty((pts.shape[0], 3))
    c = np.empty(3)
    for k in range(pts.shape[0]):
        _trilinear_color(head, nxt, coords, color, vs, pts[k, 0], pts[k, 1], pts[k, 2], c)
        out[k] = c
    return out


@njit(cache=True, parallel=True)
def _integrate(slots, coords, tsdf, weight, color, vs, tau, w_max, eps,
               rot_wc, t_wc, fx, fy, cx, cy, depth, normals, rgb):
    """Projective running-average update of every voxel in `slots`.

    rot_wc/t_wc map world to camera. Visits blocks in the given order and
    voxels in fixed index order, so results are bit-reproducible.
    """
    h, w = depth.shape
    touched = 0
    for s in prange(slots.shape[0]):
        i = slots[s]
        for local in range(512):
            gx = coords[i, 0] * 8 + (local & 7)
            gy = coords[i, 1] * 8 + ((local >> 3) & 7)
            gz = coords[i, 2] * 8 + (local >> 6)
            px, py, pz = gx * vs, gy * vs, gz * vs
            cxp = rot_wc[0, 0] * px + rot_wc[0, 1] * py + rot_wc[0, 2] * pz + t_wc[0]
            cyp = rot_wc[1, 0] * px + rot_wc[1, 1] * py + rot_wc[1, 2] * pz + t_wc[1]
            czp = rot_wc[2, 0] * px + rot_wc[2, 1] * py + rot_wc[2, 2] * pz + t_wc[2]
            if czp <= 0:
                continue
            u = int(np.floor(fx * cxp / czp + cx + 0.5))
            v = int(np.floor(fy * cyp / czp + cy + 0.5))
            if u < 0 or v < 0 or u >= w or v >= h:
                continue
            d = depth[v, u]
            if d <= 0:
                continue
            sdf = d - czp
            if sdf > tau or sdf < -tau:
                continue
            # weight from the angle between the measured normal and the line of sight
            rx = (u - cx) / fx
            ry = (v - cy) / fy
            rn = np.sqrt(rx * rx + ry * ry + 1.0)
            cosang = -(normals[v, u, 0] * rx + normals[v, u, 1] * ry + normals[v, u, 2]) / rn
            wn = max(eps, cosang)
            old_w = weight[i, local]
            tot = old_w + wn
            tsdf[i, local] = (old_w * tsdf[i, local] + wn * (sdf / tau)) / tot
            for ch in range(3):
                c = (old_w * color[i, local, ch] + wn * rgb[v, u, ch]) / tot
                color[i, local, ch] = min(255, max(0, int(np.floor(c + 0.5))))
            weight[i, local] = min(tot, w_max)
            touched += 1
    return touched


@dataclass
class IntegrationResult:
    touched: int
    allocated: int


class HashedTsdfVolume:
    """Truncated signed distance field stored in hashed 8x8x8 voxel blocks."""

    def __init__(self, voxel_size: float = 0.01, truncation: float = None, w_max: float = 128.0,
                 table_size: int = 1 << 20, capacity: int = 1024, weight_eps: float = 0.1):
        truncation = 4 * voxel_size if truncation is None else truncation
        if truncation < 2 * voxel_size:
            raise ValueError("truncation must be at least two voxels")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.w_max = float(w_max)
        self.weight_eps = float(weight_eps)
        self.table_size = int(table_size)
        self.head = np.full(self.table_size, -1, np.int64)
        self.n_blocks = 0
        self._alloc(capacity)

    def _alloc(self, capacity):
        self.coords = np.zeros((capacity, 3), np.int64)
        self.next = np.full(capacity, -1, np.int64)
        self.tsdf = np.zeros((capacity, BLOCK_VOXELS), np.float32)
        self.weight = np.zeros((capacity, BLOCK_VOXELS), np.float32)
        self.color = np.zeros((capacity, BLOCK_VOXELS, 3), np.uint8)

    def _grow(self, needed):
        cap = len(self.coords)
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap)
        old = (self.coords, self.next, self.tsdf, self.weight, self.color)
        self._alloc(new_cap)
        n = self.n_blocks
        self.coords[:n], self.next[:n], self.tsdf[:n], self.weight[:n], self.color[:n] = (a[:n] for a in old)

    # -- block table ---------------------------------------------------------
    def _tables(self):
        return self.head, self.next, self.coords

    def find_blocks(self, block_coords) -> np.ndarray:
        q = np.ascontiguousarray(np.asarray(block_coords, dtype=np.int64).reshape(-1, 3))
        return _find_many(*self._tables(), q)

    def allocate_blocks(self, block_coords) -> np.ndarray:
        """Ensure blocks exist; returns their pool slots."""
        q = np.ascontiguousarray(np.asarray(block_coords, dtype=np.int64).reshape(-1, 3))
        self._grow(self.n_blocks + len(q))
        slots, self.n_blocks = _insert_many(self.head, self.next, self.coords, q, self.n_blocks)
        return slots

    def block_coords(self) -> np.ndarray:
        return self.coords[: self.n_blocks].copy()

    def bucket_occupancy(self) -> np.ndarray:
        b = [block_hash(c, self.table_size) for c in self.coords[: self.n_blocks]]
        return np.bincount(b, minlength=0) if b else np.zeros(0, int)

    # -- voxel access --------------------------------------------------------
    def voxel_index(self, points) -> np.ndarray:
        return np.round(np.asarray(points, dtype=float) / self.voxel_size).astype(np.int64)

    def get_voxels(self, gidx):
        """(tsdf, weight, color) of global voxel indices (N, 3); unallocated -> weight 0."""
        g = np.asarray(gidx, dtype=np.int64).reshape(-1, 3)
        slots = self.find_blocks(g >> 3)
        local = ((g[:, 2] & 7) * 8 + (g[:, 1] & 7)) * 8 + (g[:, 0] & 7)
        ok = slots >= 0
        t = np.zeros(len(g), np.float32)
        w = np.zeros(len(g), np.float32)
        c = np.zeros((len(g), 3), np.uint8)
        t[ok] = self.tsdf[slots[ok], local[ok]]
        w[ok] = self.weight[slots[ok], local[ok]]
        c[ok] = self.color[slots[ok], local[ok]]
        return t, w, c

    def set_voxels(self, gidx, tsdf, weight, color=None):
        g = np.asarray(gidx, dtype=np.int64).reshape(-1, 3)
        slots = self.allocate_blocks(g >> 3)
        local = ((g[:, 2] & 7) * 8 + (g[:, 1] & 7)) * 8 + (g[:, 0] & 7)
        self.tsdf[slots, local] = tsdf
        self.weight[slots, local] = weight
        if color is not None:
            self.color[slots, local] = color

    def observed_voxel_count(self) -> int:
        return int(np.count_nonzero(self.weight[: self.n_blocks]))

    # -- integration ---------------------------------------------------------
    def integrate_frame(self, depth: np.ndarray, color: np.ndarray, pose: RigidTransform,
                        intr: PinholeIntrinsics, normals: np.ndarray = None) -> IntegrationResult:
        """Fuse one depth/color frame taken at `pose` (camera -> world)."""
        depth = np.ascontiguousarray(depth, dtype=np.float64)
        if color is None:
            color = np.zeros(depth.shape + (3,), np.uint8)
        if normals is None:
            normals = compute_normals(depth, intr)
        before = self.n_blocks
        blocks = self._band_blocks(depth, pose, intr)
        slots = self.allocate_blocks(blocks)
        inv = pose.inverse()
        touched = _integrate(
            slots, self.coords, self.tsdf, self.weight, self.color,
            self.voxel_size, self.truncation, self.w_max, self.weight_eps,
            np.ascontiguousarray(inv.rotation), np.ascontiguousarray(inv.translation),
            intr.fx, intr.fy, intr.cx, intr.cy, depth,
            np.ascontiguousarray(normals, dtype=np.float64), np.ascontiguousarray(color, dtype=np.float64),
        )
        return IntegrationResult(int(touched), self.n_blocks - before)

    def _band_blocks(self, depth, pose, intr) -> np.ndarray:
        """Unique (sorted) block coordinates met by marching each pixel ray
        through its truncation band in block-sized steps."""
        v, u = np.nonzero(depth > 0)
        if len(u) == 0:
            return np.zeros((0, 3), np.int64)
        d = depth[v, u]
        rays = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(d)], axis=-1)
        extent = BLOCK * self.voxel_size
        offsets = list(np.arange(-self.truncation, self.truncation, extent)) + [self.truncation]
        samples = []
        for off in offsets:
            z = np.maximum(d + off, 1e-6)
            samples.append(rays * z[:, None])
        pts = pose.apply(np.concatenate(samples))
        g = self.voxel_index(pts)
        return np.unique(g >> 3, axis=0)

    # -- sampling ------------------------------------------------------------
    def _kernel_args(self):
        return self.head, self.next, self.coords, self.tsdf, self.weight, self.voxel_size

    def sample_tsdf(self, points):
        """Trilinear TSDF at world point(s); NaN where any corner is unobserved."""
        p = np.asarray(points, dtype=float)
        out = _sample_many(*self._kernel_args(), np.ascontiguousarray(p.reshape(-1, 3)))
        return out[0] if p.ndim == 1 else out.reshape(p.shape[:-1])

    def sample_gradient(self, points):
        """Unit TSDF gradient by central differences; NaN rows where unobserved."""
        p = np.asarray(points, dtype=float)
        out = _gradient_many(*self._kernel_args(), np.ascontiguousarray(p.reshape(-1, 3)))
        return out[0] if p.ndim == 1 else out.reshape(p.shape)

    def sample_color(self, points):
        p = np.asarray(points, dtype=float)
        out = _color_many(self.head, self.next, self.coords, self.color, self.voxel_size,
                          np.ascontiguousarray(p.reshape(-1, 3)))
        return out[0] if p.ndim == 1 else out.reshape(p.shape)

    def sweep_empty_blocks(self) -> int:
        """Drop blocks whose voxels are all unobserved; returns how many were removed."""
        n = self.n_blocks
        keep = np.any(self.weight[:n] > 0, axis=1)
        removed = int(n - keep.sum())
        if removed == 0:
            return 0
        coords, tsdf, weight, color = (a[:n][keep].copy() for a in (self.coords, self.tsdf, self.weight, self.color))
        self.head[:] = -1
        self.n_blocks = 0
        self._alloc(max(len(coords), 16))
        slots = self.allocate_blocks(coords)
        self.tsdf[slots], self.weight[slots], self.color[slots] = tsdf, weight, color
        return removed

    # -- serialization -------------------------------------------------------
    def save(self, path):
        """Little-endian binary dump: header then per block coord + 512 voxel records."""
        n = self.n_blocks
        rec = np.zeros((n, BLOCK_VOXELS), dtype=[("tsdf", "<f4"), ("weight", "<f4"), ("rgb", "u1", 3), ("pad", "u1")])
        rec["tsdf"] = self.tsdf[:n]
        rec["weight"] = self.weight[:n]
        rec["rgb"] = self.color[:n]
        with open(path, "wb") as f:
            f.write(struct.pack("<dddq", self.voxel_size, self.truncation, self.w_max, n))
            for i in range(n):
                f.write(self.coords[i].astype("<i4").tobytes())
                f.write(rec[i].tobytes())

    @classmethod
    def load(cls, path, table_size: int = 1 << 20) -> "HashedTsdfVolume":
        dt = np.dtype([("tsdf", "<f4"), ("weight", "<f4"), ("rgb", "u1", 3), ("pad", "u1")])
        with open(path, "rb") as f:
            vs, tau, w_max, n = struct.unpack("<dddq", f.read(32))
            vol = cls(vs, tau, w_max, table_size=table_size, capacity=max(n, 16))
            coords = np.zeros((n, 3), np.int64)
            recs = np.zeros((n, BLOCK_VOXELS), dt)
            for i in range(n):
                coords[i] = np.frombuffer(f.read(12), "<i4")
                recs[i] = np.frombuffer(f.read(dt.itemsize * BLOCK_VOXELS), dt)
        slots = vol.allocate_blocks(coords)
        vol.tsdf[slots] = recs["tsdf"]
        vol.weight[slots] = recs["weight"]
        vol.color[slots] = recs["rgb"]
        return vol
