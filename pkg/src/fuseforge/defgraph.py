"""Embedded deformation graph: nodes sampled on the canonical surface, each
carrying a dual-quaternion transform that is blended onto nearby geometry."""
from dataclasses import dataclass

import numpy as np

from .dualquat import DualQuaternion, align_signs, dq_array_to_rt
from .kdtree import KdTree
from .surface import TriangleMesh

IDENTITY_DQ = np.array([1.0, 0, 0, 0, 0, 0, 0, 0])


@dataclass
class GraphNode:
    position: np.ndarray
    radius: float
    dq: DualQuaternion


class DeformationGraph:
    """Struct-of-arrays graph: positions (n, 3), radii (n,), dqs (n, 8),
    edges (n, K) of neighbor node indices."""

    def __init__(self, positions, radii, edges, k: int, dqs=None):
        self.positions = np.ascontiguousarray(positions, dtype=float)
        self.radii = np.asarray(radii, dtype=float)
        self.edges = np.asarray(edges, dtype=np.int64)
        self.k = int(k)
        n = len(self.positions)
        self.dqs = np.tile(IDENTITY_DQ, (n, 1)) if dqs is None else np.array(dqs, dtype=float)
        if np.any(self.radii <= 0):
            raise ValueError("node radii must be positive")
        self.node_tree = KdTree(self.positions)

    def __len__(self):
        return len(self.positions)

    @property
    def nodes(self) -> list:
        return [GraphNode(p, float(r), DualQuaternion.from_array(q))
                for p, r, q in zip(self.positions, self.radii, self.dqs)]

    def with_dqs(self, dqs) -> "DeformationGraph":
        g = DeformationGraph.__new__(DeformationGraph)
        g.positions, g.radii, g.edges, g.k = self.positions, self.radii, self.edges, self.k
        g.node_tree = self.node_tree
        g.dqs = np.array(dqs, dtype=float)
        return g

    def copy(self) -> "DeformationGraph":
        return self.with_dqs(self.dqs.copy())

    def edge_list(self) -> np.ndarray:
        """Directed (i, j) pairs, node-major then neighbor order."""
        i = np.repeat(np.arange(len(self)), self.edges.shape[1])
        return np.stack([i, self.edges.ravel()], axis=1)

    def influences(self, points):
        """K nearest nodes of each point and their normalized weights."""
        k = min(self.k, len(self))
        idx, dist = self.node_tree.query(points, k)
        w = node_weight_array(self.radii[idx], dist)
        s = w.sum(axis=1, keepdims=True)
        if np.any(s <= 0):
            raise ValueError("point outside every node's support")
        return idx, w / s

    # text serialization: "x y z radius | 8 dq scalars" per node, then "i: j j j j"
    def to_text(self) -> str:
        lines = [f"nodes {len(self)} k {self.k}"]
        for p, r, q in zip(self.positions, self.radii, self.dqs):
            lines.append(" ".join(repr(float(v)) for v in (*p, r)) + " | "
                         + " ".join(repr(float(v)) for v in q))
        for i, nb in enumerate(self.edges):
            lines.append(f"{i}: " + " ".join(str(int(j)) for j in nb))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DeformationGraph":
        rows = [ln for ln in text.splitlines() if ln.strip()]
        try:
            head = rows[0].split()
            n, k = int(head[1]), int(head[3])
            pos, rad, dqs, edges = [], [], [], []
            for ln in rows[1:1 + n]:
                a, b = ln.split("|")
                vals = [float(v) for v in a.split()]
                pos.append(vals[:3])
                rad.append(vals[3])
                dqs.append([float(v) for v in b.split()])
            for ln in rows[1 + n:1 + 2 * n]:
                _, nb = ln.split(":")
                edges.append([int(j) for j in nb.split()])
        except (IndexError, ValueError) as exc:
            raise ValueError(f"malformed graph text: {exc}") from exc
        return cls(np.array(pos), np.array(rad), np.array(edges), k, np.array(dqs))


def node_weight_array(radii, dist):
    return np.exp(-np.asarray(dist) ** 2 / (2.0 * np.asarray(radii) ** 2))


def node_weight(node: GraphNode, x) -> float:
    """Gaussian influence exp(-|v - x|^2 / (2 w^2)), 1 at the node itself."""
    if node.radius <= 0:
        raise ValueError("node radius must be positive")
    d = np.linalg.norm(np.asarray(node.position, float) - np.asarray(x, float))
    return float(node_weight_array(node.radius, d))


def build_graph(mesh: TriangleMesh, node_count: int, k: int = 4, seed: int = 0,
                radius_scale: float = 1.5) -> DeformationGraph:
    """Seeded uniform sampling of mesh vertices as nodes; identity transforms."""
    nv = mesh.n_vertices
    if node_count > nv:
        raise ValueError(f"mesh has {nv} vertices, fewer than {node_count} requested nodes")
    if node_count <= k:
        raise ValueError("node_count must exceed k")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(nv, size=node_count, replace=False)
    pos = mesh.vertices[chosen].copy()
    tree = KdTree(pos)
    idx, dist = tree.query(pos, k + 1)
    edges = np.empty((node_count, k), np.int64)
    kth = np.empty(node_count)
    for i in range(node_count):
        keep = idx[i] != i
        nb, dd = idx[i][keep][:k], dist[i][keep][:k]
        edges[i] = nb
        kth[i] = dd[-1]
    radii = radius_scale * kth
    if np.any(radii <= 0):
        raise ValueError("coincident graph nodes give zero radius")
    return DeformationGraph(pos, radii, edges, k)


def blend_at(graph: DeformationGraph, idx, w) -> np.ndarray:
    """Sign-aligned weighted sum (m, 8) of node dqs idx (m, K); normalize before use."""
    q = graph.dqs[idx]
    signs = align_signs(q)
    b = np.sum((w * signs)[..., None] * q, axis=-2)
    return b


def warp_points(graph: DeformationGraph, points, normals=None):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    idx, w = graph.influences(pts)
    rot, trans = dq_array_to_rt(blend_at(graph, idx, w))
    out = np.einsum("nij,nj->ni", rot, pts) + trans
    if normals is None:
        return out, None
    nr = np.einsum("nij,nj->ni", rot, np.atleast_2d(normals))
    nr /= np.maximum(np.linalg.norm(nr, axis=1, keepdims=True), 1e-300)
    return out, nr


def warp_point(graph: DeformationGraph, x, normal):
    p, n = warp_points(graph, np.reshape(x, (1, 3)), np.reshape(normal, (1, 3)))
    return p[0], n[0]


def warp_mesh(graph: DeformationGraph, mesh: TriangleMesh) -> TriangleMesh:
    v, n = warp_points(graph, mesh.vertices, mesh.normals)
    return TriangleMesh(v, mesh.faces.copy(), n, None if mesh.colors is None else mesh.colors.copy())
