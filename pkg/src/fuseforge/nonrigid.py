"""Warp-field estimation: per-node twists minimizing a point-to-plane data
term plus an as-rigid-as-possible regularizer, by sparse Gauss-Newton with a
Levenberg-Marquardt fallback."""
from dataclasses import dataclass
import logging

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .camera import PinholeIntrinsics
from .defgraph import DeformationGraph, blend_at, warp_mesh
from .dualquat import (align_signs, blended_point_jacobian, dq_array_to_rt, dq_from_twists,
                       left_perturbation_jacobian, normalize_dq, qmul)
from .imageproc import compute_normals
from .se3 import RigidTransform
from .surface import TriangleMesh, raycast_mesh
from .tracking import robust_weight

log = logging.getLogger(__name__)


class AssociationError(RuntimeError):
    pass


class SolverDivergence(RuntimeError):
    pass


@dataclass
class NonRigidConfig:
    phi: float = 0.2
    max_iters: int = 30
    tukey_lambda: float = 0.05  # meters
    step_tol: float = 1e-7
    lm_tau: float = 1e-4
    lm_factor: float = 10.0
    damping_floor: float = 1e-9  # relative to max diag, keeps null spaces solvable
    max_failed_steps: int = 3
    mode: str = "index"  # or "projective"
    dist_reject: float = 0.10
    angle_reject: float = np.radians(20.0)
    pixel_stride: int = 2  # projective mode subsampling
    solve_rtol: float = 1e-8
    energy_rtol: float = 1e-9  # relative energy change treated as stationary

    def __post_init__(self):
        if self.phi < 0:
            raise ValueError("phi must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.mode not in ("index", "projective"):
            raise ValueError(f"unknown association mode {self.mode!r}")


@dataclass
class NodeCorrespondence:
    """Struct-of-arrays association set (m rows, K influencing nodes each)."""
    canonical: np.ndarray  # (m, 3) canonical surface point
    warped: np.ndarray  # (m, 3) v_u
    normal: np.ndarray  # (m, 3) n_u, frozen at association time
    target: np.ndarray  # (m, 3) vl_u
    nodes: np.ndarray  # (m, K) ascending node indices
    weights: np.ndarray  # (m, K) normalized blend weights

    def __len__(self):
        return len(self.canonical)


class SparseBlockMatrix:
    """Rows of dense 1x6 / 3x6 blocks placed at node-major 6-column slots."""

    def __init__(self, cols, blocks, n_nodes: int):
        self.cols = np.asarray(cols, dtype=np.int64)  # (R, B)
        self.blocks = np.asarray(blocks, dtype=float)  # (R, B, h, 6)
        self.n_nodes = int(n_nodes)
        if self.blocks.ndim != 4 or self.blocks.shape[:2] != self.cols.shape:
            raise ValueError("blocks must be (rows, blocks_per_row, h, 6)")

    @property
    def row_height(self) -> int:
        return self.blocks.shape[2]

    @property
    def shape(self):
        return (len(self.cols) * self.row_height, 6 * self.n_nodes)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        h = self.row_height
        for r in range(len(self.cols)):
            for b, c in enumerate(self.cols[r]):
                out[r * h:(r + 1) * h, 6 * c:6 * c + 6] += self.blocks[r, b]
        return out

    def to_csr(self) -> sp.csr_matrix:
        nr, nb = self.cols.shape
        h = self.row_height
        rows = (np.arange(nr)[:, None, None, None] * h + np.arange(h)[None, None, :, None])
        rows = np.broadcast_to(rows, (nr, nb, h, 6))
        cols = np.broadcast_to(6 * self.cols[:, :, None, None] + np.arange(6), (nr, nb, h, 6))
        return sp.csr_matrix((self.blocks.ravel(), (rows.ravel(), cols.ravel())), shape=self.shape)

    def jtj(self) -> sp.csr_matrix:
        """Block-accumulated J^T J (6n x 6n) without forming J."""
        nr, nb = self.cols.shape
        # (R, B, B, 6, 6) outer block products
        prod = np.einsum("rahi,rbhj->rabij", self.blocks, self.blocks)
        rows = 6 * self.cols[:, :, None, None, None] + np.arange(6)[:, None]
        cols = 6 * self.cols[:, None, :, None, None] + np.arange(6)[None, :]
        rows = np.broadcast_to(rows, prod.shape)
        cols = np.broadcast_to(cols, prod.shape)
        n = 6 * self.n_nodes
        return sp.coo_matrix((prod.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()

    def jtr(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float).reshape(len(self.cols), self.row_height)
        contrib = np.einsum("rbhj,rh->rbj", self.blocks, r)
        out = np.zeros((self.n_nodes, 6))
        np.add.at(out, self.cols, contrib)
        return out.ravel()


# -- association -----------------------------------------------------------------

def _sorted_influences(graph: DeformationGraph, points):
    idx, w = graph.influences(points)
    order = np.argsort(idx, axis=1, kind="stable")
    return np.take_along_axis(idx, order, 1), np.take_along_axis(w, order, 1)


def associate_index(canonical: TriangleMesh, graph: DeformationGraph, target: TriangleMesh) -> NodeCorrespondence:
    """Vertex-to-vertex pairing for meshes that share topology."""
    if target.n_vertices != canonical.n_vertices:
        raise AssociationError("index association needs meshes with identical vertex count")
    warped = warp_mesh(graph, canonical)
    idx, w = _sorted_influences(graph, canonical.vertices)
    return NodeCorrespondence(canonical.vertices.copy(), warped.vertices, warped.normals,
                              np.asarray(target.vertices, float).copy(), idx, w)


def associate_projective(canonical: TriangleMesh, graph: DeformationGraph, live_depth: np.ndarray,
                         pose: RigidTransform, intr: PinholeIntrinsics, cfg: NonRigidConfig,
                         live_normals: np.ndarray = None) -> NodeCorrespondence:
    """Render the warped canonical mesh and pair it pixelwise with live depth."""
    warped = warp_mesh(graph, canonical)
    view = raycast_mesh(warped, pose, intr)
    if live_normals is None:
        live_normals = compute_normals(live_depth, intr)
    s = max(1, int(cfg.pixel_stride))
    mask = np.zeros(live_depth.shape, bool)
    mask[::s, ::s] = True
    mask &= view.valid & (live_depth > 0) & (np.linalg.norm(live_normals, axis=-1) > 0)
    v, u = np.nonzero(mask)
    live_pts = intr.pixel_rays()[v, u] * live_depth[v, u, None]
    vw = pose.apply(view.points[v, u])
    nw = pose.rotate(view.normals[v, u])
    lw = pose.apply(live_pts)
    ln = pose.rotate(live_normals[v, u])
    ok = np.linalg.norm(vw - lw, axis=1) <= cfg.dist_reject
    ok &= np.arccos(np.clip(np.sum(nw * ln, axis=1), -1, 1)) <= cfg.angle_reject
    v, u = v[ok], u[ok]
    if len(v) == 0:
        raise AssociationError("no projective correspondences")
    f = canonical.faces[view.face_index[v, u]]
    canon = np.einsum("ij,ijk->ik", view.barycentric[v, u], canonical.vertices[f])
    idx, w = _sorted_influences(graph, canon)
    return NodeCorrespondence(canon, vw[ok], nw[ok], lw[ok], idx, w)


def associate_nonrigid(canonical: TriangleMesh, graph: DeformationGraph, live, pose=None, intr=None,
                       cfg: NonRigidConfig = None) -> NodeCorrespondence:
    """`live` is a target TriangleMesh (index mode) or a depth image (projective mode)."""
    cfg = cfg or NonRigidConfig()
    if isinstance(live, TriangleMesh):
        corrs = associate_index(canonical, graph, live)
    else:
        if pose is None or intr is None:
            raise ValueError("projective association needs a pose and intrinsics")
        corrs = associate_projective(canonical, graph, np.asarray(live, float), pose, intr, cfg)
    if len(corrs) == 0:
        raise AssociationError("empty association set")
    return corrs


# -- residuals and Jacobians ---------------------------------------------------------

def warp_canonical(graph: DeformationGraph, corrs: NodeCorrespondence) -> np.ndarray:
    rot, trans = dq_array_to_rt(blend_at(graph, corrs.nodes, corrs.weights))
    return np.einsum("nij,nj->ni", rot, corrs.canonical) + trans


def data_residuals(graph: DeformationGraph, corrs: NodeCorrespondence) -> np.ndarray:
    """Unweighted point-to-plane residuals n_u . (v_u - vl_u) at the current warp."""
    v = warp_canonical(graph, corrs)
    return np.sum(corrs.normal * (v - corrs.target), axis=1)


def tukey_rho(r, lam: float):
    """Tukey biweight cost scaled so that rho(r) ~ r^2 near zero."""
    a = np.minimum(np.abs(r) / lam, 1.0)
    return lam**2 / 3.0 * (1.0 - (1.0 - a**2) ** 3)


def build_data_term(corrs: NodeCorrespondence, graph: DeformationGraph, tukey_lambda: float = 0.05,
                    robust_weights=None):
    """Stacked data rows sqrt(w_u) n_u . (v_u - vl_u) and their K node blocks.

    Blocks are the exact derivative of the blended warp under a left
    perturbation exp(xi_j) applied to node j. Rows whose Tukey weight is zero
    are dropped. Returns (J, r, kept_row_indices).
    """
    if len(corrs) == 0:
        raise ValueError("no correspondences")
    r = data_residuals(graph, corrs)
    w = robust_weight("tukey", r, tukey_lambda) if robust_weights is None else np.asarray(robust_weights)
    keep = np.nonzero(w > 0)[0]
    sw = np.sqrt(w[keep])
    nodes_q = graph.dqs[corrs.nodes]  # (m, K, 8)
    signs = align_signs(nodes_q)  # same reference column as blend_at
    b = blend_at(graph, corrs.nodes, corrs.weights)
    k = corrs.nodes.shape[1]
    blocks = np.empty((len(keep), k, 1, 6))
    for row, u in enumerate(keep):
        jp = corrs.normal[u] @ blended_point_jacobian(b[u], corrs.canonical[u])  # (8,)
        for a in range(k):
            scale = sw[row] * corrs.weights[u, a] * signs[u, a]
            blocks[row, a, 0] = scale * (jp @ left_perturbation_jacobian(nodes_q[u, a]))
    return SparseBlockMatrix(corrs.nodes[keep], blocks, len(graph)), sw * r[keep], keep


def reg_residuals(graph: DeformationGraph) -> tuple:
    """alpha_ij (T_i v_j - T_j v_j) per directed edge, with T_i v_j, T_j v_j."""
    e = graph.edge_list()
    rot, trans = dq_array_to_rt(graph.dqs)
    vj = graph.positions[e[:, 1]]
    ti = np.einsum("nij,nj->ni", rot[e[:, 0]], vj) + trans[e[:, 0]]
    tj = np.einsum("nij,nj->ni", rot[e[:, 1]], vj) + trans[e[:, 1]]
    alpha = np.maximum(graph.radii[e[:, 0]], graph.radii[e[:, 1]])
    return alpha[:, None] * (ti - tj), ti, tj, alpha, e


def _skew_many(p):
    out = np.zeros((len(p), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -p[:, 2], p[:, 1]
    out[:, 1, 0], out[:, 1, 2] = p[:, 2], -p[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -p[:, 1], p[:, 0]
    return out


def build_reg_term(graph: DeformationGraph, phi: float):
    """3-row blocks per directed edge, scaled by sqrt(phi)."""
    res, ti, tj, alpha, e = reg_residuals(graph)
    s = np.sqrt(phi)
    eye = np.eye(3)
    bi = np.concatenate([-_skew_many(ti), np.broadcast_to(eye, (len(e), 3, 3))], axis=2)
    bj = -np.concatenate([-_skew_many(tj), np.broadcast_to(eye, (len(e), 3, 3))], axis=2)
    blocks = np.stack([bi, bj], axis=1) * (s * alpha)[:, None, None, None]
    cols = e.copy()
    # block columns strictly increasing per row
    swap = cols[:, 0] > cols[:, 1]
    cols[swap] = cols[swap][:, ::-1]
    blocks[swap] = blocks[swap][:, ::-1]
    return SparseBlockMatrix(cols, blocks, len(graph)), s * res.ravel()


# -- solver --------------------------------------------------------------------------

@dataclass
class EnergyRecord:
    iteration: int
    e_data: float
    e_reg: float
    e_total: float
    step_norm: float


@dataclass
class WarpResult:
    graph: DeformationGraph
    energies: list
    iterations: int
    converged: bool

    def energy_csv(self) -> str:
        lines = ["iteration,E_data,E_reg,E_total,step_norm"]
        for e in self.energies:
            lines.append(f"{e.iteration},{e.e_data:.12e},{e.e_reg:.12e},{e.e_total:.12e},{e.step_norm:.12e}")
        return "\n".join(lines) + "\n"


def energies(graph: DeformationGraph, corrs: NodeCorrespondence, cfg: NonRigidConfig):
    ed = float(np.sum(tukey_rho(data_residuals(graph, corrs), cfg.tukey_lambda)))
    er = float(np.sum(reg_residuals(graph)[0] ** 2))
    return ed, er, ed + cfg.phi * er


def apply_twists(graph: DeformationGraph, h) -> DeformationGraph:
    """Left-compose exp(xi_j) onto every node transform."""
    d = dq_from_twists(np.asarray(h, dtype=float).reshape(len(graph), 6))
    q = graph.dqs
    real = qmul(d[:, :4], q[:, :4])
    dual = qmul(d[:, :4], q[:, 4:]) + qmul(d[:, 4:], q[:, :4])
    return graph.with_dqs(normalize_dq(np.concatenate([real, dual], axis=1)))


def assemble(graph: DeformationGraph, corrs: NodeCorrespondence, cfg: NonRigidConfig):
    jd, rd, _ = build_data_term(corrs, graph, cfg.tukey_lambda)
    h = jd.jtj()
    g = jd.jtr(rd)
    if cfg.phi > 0 and graph.edges.size:
        jr, rr = build_reg_term(graph, cfg.phi)
        h = h + jr.jtj()
        g = g + jr.jtr(rr)
    return h, g


def solve_normal_equations(h: sp.spmatrix, g: np.ndarray, damping: float, rtol: float = 1e-8) -> np.ndarray:
    a = (h + damping * sp.identity(h.shape[0], format="csr")).tocsc()
    x = spsolve(a, -g)
    res = np.linalg.norm(a @ x + g)
    if not np.all(np.isfinite(x)) or res > rtol * max(np.linalg.norm(g), 1e-300):
        raise np.linalg.LinAlgError(f"sparse solve residual {res:.3e} above tolerance")
    return x


def solve_warp_field(graph: DeformationGraph, canonical: TriangleMesh, live, cfg: NonRigidConfig = None,
                     pose: RigidTransform = None, intr: PinholeIntrinsics = None) -> WarpResult:
    """Optimize node transforms so the warped canonical mesh meets `live`."""
    cfg = cfg or NonRigidConfig()
    if isinstance(live, TriangleMesh) and cfg.mode == "projective":
        raise ValueError("projective mode needs a depth image target")
    g = graph.copy()
    corrs = associate_nonrigid(canonical, g, live, pose, intr, cfg)
    e_data, e_reg, e_tot = energies(g, corrs, cfg)
    trace = [EnergyRecord(0, e_data, e_reg, e_tot, 0.0)]
    damping = 0.0
    failures = 0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if e_tot < 1e-14:
            converged = True
            break
        h, grad = assemble(g, corrs, cfg)
        maxdiag = max(h.diagonal().max(), 1e-300)
        step = solve_normal_equations(h, grad, damping + cfg.damping_floor * maxdiag, cfg.solve_rtol)
        step_norm = float(np.linalg.norm(step))
        if step_norm < cfg.step_tol:
            converged = True
            break
        trial = apply_twists(g, step)
        if cfg.mode == "projective":
            trial_corrs = associate_nonrigid(canonical, trial, live, pose, intr, cfg)
        else:
            trial_corrs = corrs
        td, tr, tt = energies(trial, trial_corrs, cfg)
        # compare on the association the step was computed for
        cmp = energies(trial, corrs, cfg)[2] if trial_corrs is not corrs else tt
        stationary = abs(cmp - e_tot) <= cfg.energy_rtol * e_tot
        if cmp < e_tot:
            g, corrs = trial, trial_corrs
            e_data, e_reg, e_tot = td, tr, tt
            trace.append(EnergyRecord(len(trace), td, tr, tt, step_norm))
            failures = 0
            damping = damping / cfg.lm_factor if damping > 0 else 0.0
            if stationary:
                converged = True
                break
        else:
            failures += 1
            if stationary or e_tot < 1e-12:
                # rejected only by round-off: the energy is at a stationary point
                converged = True
                break
            if damping > 0 and failures >= cfg.max_failed_steps:
                raise SolverDivergence(f"energy increased on {failures} consecutive damped steps")
            # after a run of accepted steps the damping may have decayed to nothing
            damping = max(damping * cfg.lm_factor, cfg.lm_tau * maxdiag)
        log.debug("iter %d: E=%.6e |h|=%.3e damping=%.3e", it, e_tot, step_norm, damping)
    return WarpResult(g, trace, it, converged)
