"""Exact k-nearest-neighbor search on a median-split 3-d tree.

Ties in distance are broken by the smaller point index so results are
fully deterministic and identical to a sorted brute-force scan.
"""
import numpy as np
from numba import njit


class KdTree:
    """Balanced tree over (n, 3) points; axis cycles x -> y -> z with depth."""

    def __init__(self, points):
        pts = np.ascontiguousarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError("points must be a non-empty (n, 3) array")
        self.points = pts
        n = len(pts)
        self.point = np.full(n, -1, np.int64)
        self.axis = np.zeros(n, np.int64)
        self.left = np.full(n, -1, np.int64)
        self.right = np.full(n, -1, np.int64)
        self._next = 0
        self.root = self._build(np.arange(n), 0)

    def _build(self, ids, depth):
        if len(ids) == 0:
            return -1
        ax = depth % 3
        # lexsort on (coordinate, index) keeps the split deterministic
        ids = ids[np.lexsort((ids, self.points[ids, ax]))]
        mid = len(ids) // 2
        node = self._next
        self._next += 1
        self.point[node] = ids[mid]
        self.axis[node] = ax
        self.left[node] = self._build(ids[:mid], depth + 1)
        self.right[node] = self._build(ids[mid + 1:], depth + 1)
        return node

    def __len__(self):
        return len(self.points)

    def query(self, queries, k: int):
        """Indices and distances (m, min(k, n)) sorted ascending."""
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=float)
        kk = min(int(k), len(self.points))
        if kk < 1:
            raise ValueError("k must be >= 1")
        idx, d2 = _knn_batch(self.points, self.point, self.axis, self.left, self.right,
                             self.root, q, kk)
        return idx, np.sqrt(d2)


@njit(cache=True)
def _dist2(a, b):
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    dz = a[2] - b[2]
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _knn_one(pts, point, axis, left, right, root, q, k, out_i, out_d):
    n_best = 0
    stack_node = np.empty(128, np.int64)
    stack_bound = np.empty(128)
    sp = 0
    stack_node[0] = root
    stack_bound[0] = 0.0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        bound = stack_bound[sp]
        if node < 0:
            continue
        if n_best == k and bound > out_d[k - 1]:
            continue
        p = point[node]
        d2 = _dist2(q, pts[p])
        if n_best < k or d2 < out_d[k - 1] or (d2 == out_d[k - 1] and p < out_i[k - 1]):
            j = n_best if n_best < k else k - 1
            while j > 0 and (out_d[j - 1] > d2 or (out_d[j - 1] == d2 and out_i[j - 1] > p)):
                out_d[j] = out_d[j - 1]
                out_i[j] = out_i[j - 1]
                j -= 1
            out_d[j] = d2
            out_i[j] = p
            if n_best < k:
                n_best += 1
        ax = axis[node]
        diff = q[ax] - pts[p, ax]
        if diff < 0:
            near, far = left[node], right[node]
        else:
            near, far = right[node], left[node]
        # far side first so the near side is popped next
        stack_node[sp] = far
        stack_bound[sp] = diff * diff
        sp += 1
        stack_node[sp] = near
        stack_bound[sp] = bound
        sp += 1


@njit(cache=True)
def _knn_batch(pts, point, axis, left, right, root, queries, k):
    m = queries.shape[0]
    out_i = np.empty((m, k), np.int64)
    out_d = np.empty((m, k))
    for i in range(m):
        _knn_one(pts, point, axis, left, right, root, queries[i], k, out_i[i], out_d[i])
    return out_i, out_d


def kdtree_knn(tree: KdTree, query, k: int) -> list:
    """[(index, distance), ...] for a single query, sorted ascending."""
    idx, dist = tree.query(np.asarray(query, dtype=float).reshape(1, 3), k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


def brute_force_knn(points, query, k: int):
    """Reference scan with the same distance arithmetic and tie rule."""
    pts = np.asarray(points, dtype=float)
    q = np.asarray(query, dtype=float)
    d = pts - q
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    order = np.lexsort((np.arange(len(pts)), d2))[:min(k, len(pts))]
    return order, np.sqrt(d2[order])
