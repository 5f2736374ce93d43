"""Frame-to-model camera tracking: point-to-plane ICP plus a photometric term,
solved coarse-to-fine with Gauss-Newton and robust weights."""
from dataclasses import dataclass, field
import logging

import numpy as np

from .camera import PinholeIntrinsics
from .imageproc import FramePyramid, PyramidLevel, build_pyramid, intensity_from_rgb
from .interp import bilinear_sample
from .se3 import RigidTransform, skew, twist_to_transform
from .surface import RenderedView, TriangleMesh, raycast_mesh, raycast_volume
from .volume import HashedTsdfVolume

log = logging.getLogger(__name__)


class TrackingFailure(RuntimeError):
    pass


class DegenerateGeometryError(np.linalg.LinAlgError):
    pass


@dataclass
class TrackerConfig:
    lambda_photo: float = 0.1
    iters_per_level: tuple = (10, 5, 4)  # coarse -> fine
    dist_reject: float = 0.10  # meters
    angle_reject: float = np.radians(20.0)  # radians; config files give degrees
    huber_delta: float = 0.05  # meters, geometric residuals
    photo_huber_delta: float = 0.1  # intensity units
    photo_depth_gate: float = 0.05  # meters, occlusion test for photometric pixels
    lm_tau: float = 1e-4
    min_correspondences: int = 500
    step_tol: float = 1e-6
    depth_range: tuple = (0.1, 8.0)
    update_mode: str = "small-angle"

    def __post_init__(self):
        if not 0 <= self.lambda_photo <= 1:
            raise ValueError("lambda_photo must lie in [0, 1]")
        if min(self.iters_per_level) < 0:
            raise ValueError("iteration counts must be non-negative")
        for name in ("dist_reject", "angle_reject", "huber_delta", "lm_tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Correspondences:
    """Struct-of-arrays correspondence set; rows in row-major pixel order."""
    source: np.ndarray  # live points, camera frame
    source_world: np.ndarray  # live points under the current guess
    target: np.ndarray  # predicted model points, world frame
    normal: np.ndarray  # predicted model normals, world frame
    weight: np.ndarray  # robust weights in [0, 1]
    pixels: np.ndarray = None

    def __len__(self):
        return len(self.source)

    @property
    def residuals(self) -> np.ndarray:
        return np.sum((self.source_world - self.target) * self.normal, axis=1)


@dataclass
class NormalEquations6:
    A: np.ndarray
    b: np.ndarray

    def __add__(self, other):
        return NormalEquations6(self.A + other.A, self.b + other.b)

    def scaled(self, s: float) -> "NormalEquations6":
        return NormalEquations6(s * self.A, s * self.b)


def robust_weight(kernel: str, r, param: float):
    """Huber or Tukey IRLS weight in [0, 1]."""
    if param <= 0:
        raise ValueError("kernel parameter must be positive")
    a = np.abs(np.asarray(r, dtype=float))
    if kernel == "huber":
        return np.where(a <= param, 1.0, param / np.maximum(a, 1e-300))
    if kernel == "tukey":
        return np.where(a <= param, (1.0 - (a / param) ** 2) ** 2, 0.0)
    raise ValueError(f"unknown kernel {kernel!r}")


def find_correspondences(live: PyramidLevel, predicted: RenderedView, guess: RigidTransform,
                         cfg: TrackerConfig) -> Correspondences:
    """Projective association of live pixels against a predicted model view."""
    intr = live.intr
    if live.depth.shape != predicted.depth.shape:
        raise ValueError("live and predicted views must share dimensions")
    h, w = live.depth.shape
    nl = np.linalg.norm(live.normals, axis=-1) > 0
    v, u = np.nonzero((live.depth > 0) & nl)
    d = live.depth[v, u]
    src = np.stack([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d], axis=1)
    src_w = guess.apply(src)
    pc = predicted.pose.inverse().apply(src_w)
    front = pc[:, 2] > 0
    z = np.where(front, pc[:, 2], 1.0)
    pu = np.floor(intr.fx * pc[:, 0] / z + intr.cx + 0.5).astype(np.int64)
    pv = np.floor(intr.fy * pc[:, 1] / z + intr.cy + 0.5).astype(np.int64)
    ok = front & (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
    pu, pv = np.where(ok, pu, 0), np.where(ok, pv, 0)
    ok &= predicted.depth[pv, pu] > 0
    tgt = predicted.pose.apply(predicted.points[pv, pu])
    tn = predicted.pose.rotate(predicted.normals[pv, pu])
    ln = guess.rotate(live.normals[v, u])
    ok &= np.linalg.norm(src_w - tgt, axis=1) <= cfg.dist_reject
    cosang = np.clip(np.sum(ln * tn, axis=1), -1.0, 1.0)
    ok &= np.arccos(cosang) <= cfg.angle_reject
    res = np.sum((src_w - tgt) * tn, axis=1)
    wgt = robust_weight("huber", res, cfg.huber_delta)
    return Correspondences(src[ok], src_w[ok], tgt[ok], tn[ok], wgt[ok], np.stack([u, v], 1)[ok])


def geometric_jacobian(corrs: Correspondences) -> tuple:
    """Row-stacked point-to-plane Jacobian (N, 6) and residuals (N,)."""
    q, n = corrs.source_world, corrs.normal
    return np.hstack([np.cross(q, n), n]), corrs.residuals


def build_geometric_system(corrs: Correspondences) -> NormalEquations6:
    """A = sum w [c; n][c; n]^T, b = sum w [c; n](d . n) with c = q x n, d = q - p."""
    if len(corrs) == 0:
        raise ValueError("no correspondences")
    j, r = geometric_jacobian(corrs)
    jw = j * corrs.weight[:, None]
    return NormalEquations6(jw.T @ j, jw.T @ r)


def photometric_terms(live: PyramidLevel, predicted_intensity: np.ndarray, predicted: RenderedView,
                      guess: RigidTransform, depth_gate: float = np.inf):
    """Per-pixel photometric residuals and 1x6 Jacobian rows.

    residual = I_model(warp(p)) - I_live(p), with warp(p) the live pixel moved
    by the current guess into the predicted camera. Rows are the exact chain
    rule through the bilinear sampler.
    """
    intr = predicted.intr
    h, w = predicted_intensity.shape
    v, u = np.nonzero(live.depth > 0)
    d = live.depth[v, u]
    src = np.stack([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d], axis=1)
    q = guess.apply(src)
    inv = predicted.pose.inverse()
    pc = inv.apply(q)
    ok = pc[:, 2] > 1e-6
    z = np.where(ok, pc[:, 2], 1.0)
    wu = intr.fx * pc[:, 0] / z + intr.cx
    wv = intr.fy * pc[:, 1] / z + intr.cy
    ok &= (wu >= 0) & (wu <= w - 1) & (wv >= 0) & (wv <= h - 1)
    wu, wv = np.where(ok, wu, 0.0), np.where(ok, wv, 0.0)
    # every bilinear tap must hit valid predicted geometry
    u0 = np.clip(np.floor(wu).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(wv).astype(np.int64), 0, h - 2)
    taps = np.stack([predicted.depth[v0, u0], predicted.depth[v0, u0 + 1],
                     predicted.depth[v0 + 1, u0], predicted.depth[v0 + 1, u0 + 1]], axis=1)
    ok &= taps.min(axis=1) > 0
    # occlusion and depth-edge gate: taps must agree with the warped depth
    ok &= np.abs(taps - z[:, None]).max(axis=1) <= depth_gate
    val, gu, gv = bilinear_sample(predicted_intensity, wu, wv, with_gradient=True)
    r = val - live.intensity[v, u]
    x, y = pc[:, 0], pc[:, 1]
    dproj = np.zeros((len(z), 2, 3))
    dproj[:, 0, 0] = intr.fx / z
    dproj[:, 0, 2] = -intr.fx * x / z**2
    dproj[:, 1, 1] = intr.fy / z
    dproj[:, 1, 2] = -intr.fy * y / z**2
    grad = np.stack([gu, gv], axis=1)
    gp = np.einsum("ni,nij->nj", grad, dproj) @ inv.rotation  # d r / d q (world)
    # d q / d xi for a left-composed world-frame twist: [-[q]x | I]
    jrot = np.cross(q, gp)
    j = np.hstack([jrot, gp])
    return j[ok], r[ok], np.stack([u, v], 1)[ok]


def build_photometric_system(live: PyramidLevel, predicted: RenderedView, guess: RigidTransform,
                             predicted_intensity: np.ndarray = None, huber_delta: float = None,
                             depth_gate: float = np.inf) -> NormalEquations6:
    if predicted_intensity is None:
        predicted_intensity = intensity_from_rgb(predicted.color)
    j, r, _ = photometric_terms(live, predicted_intensity, predicted, guess, depth_gate)
    wgt = np.ones_like(r) if huber_delta is None else robust_weight("huber", r, huber_delta)
    jw = j * wgt[:, None]
    return NormalEquations6(jw.T @ j, jw.T @ r)


def solve_step(system: NormalEquations6, damping: float = 0.0) -> np.ndarray:
    """Solve (A + damping I) h = -b by Cholesky; rank deficiency raises."""
    a = system.A + damping * np.eye(6)
    try:
        l = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("normal equations are not positive definite") from exc
    dg = np.diag(l) ** 2
    if dg.min() <= 1e-12 * max(dg.max(), 1e-300):
        raise DegenerateGeometryError("normal equations are rank deficient")
    y = np.linalg.solve(l, -system.b)
    return np.linalg.solve(l.T, y)


@dataclass
class LevelStats:
    level: int
    iterations: int
    correspondences: int
    residual_rms: float
    residual_history: list = field(default_factory=list)


@dataclass
class TrackResult:
    pose: RigidTransform
    stats: list


def render_model(model, pose: RigidTransform, intr: PinholeIntrinsics, depth_range) -> RenderedView:
    if isinstance(model, HashedTsdfVolume):
        return raycast_volume(model, pose, intr, depth_range)
    if isinstance(model, TriangleMesh):
        return raycast_mesh(model, pose, intr)
    return model(pose, intr)


def _linearize(lv: PyramidLevel, predicted: RenderedView, pred_gray, pose: RigidTransform, corrs: Correspondences,
               cfg: TrackerConfig):
    """Combined system and the energy it approximates, sum w r_geo^2 + lambda sum w r_pho^2,
    normalized by the geometric count so changing association sizes stay comparable."""
    r = corrs.residuals
    geo = float(np.sum(corrs.weight * r * r))
    system = build_geometric_system(corrs)
    energy = geo
    if cfg.lambda_photo > 0:
        j, rp, _ = photometric_terms(lv, pred_gray, predicted, pose, cfg.photo_depth_gate)
        wp = robust_weight("huber", rp, cfg.photo_huber_delta)
        jw = j * wp[:, None]
        system = system + NormalEquations6(jw.T @ j, jw.T @ rp).scaled(cfg.lambda_photo)
        energy += cfg.lambda_photo * float(np.sum(wp * rp * rp))
    return system, energy / len(r), np.sqrt(geo / len(r))


def track_frame(live: FramePyramid, model, prev_pose: RigidTransform, cfg: TrackerConfig = None) -> TrackResult:
    """Estimate the live camera pose (camera -> world) against `model`.

    `model` is a TSDF volume, a triangle mesh, or a callable
    ``render(pose, intrinsics) -> RenderedView``.
    """
    cfg = cfg or TrackerConfig()
    n_levels = len(live)
    iters = list(cfg.iters_per_level)
    if len(iters) < n_levels:
        iters = [iters[0]] * (n_levels - len(iters)) + iters
    iters = iters[-n_levels:]  # coarse -> fine, aligned with the finest levels
    if not np.any(live[0].depth > 0):
        raise TrackingFailure("live frame has no valid depth")
    pose = prev_pose
    stats = []
    # one full-resolution render at the initial guess; a sharp render at a coarser level
    # is exactly its subsampling (pixel u' of level l sits at u = 2^l u')
    start = render_model(model, prev_pose, live[0].intr, cfg.depth_range)

    def predict(level, at):
        if at is prev_pose:
            st, h, w = 1 << level, live[level].intr.height, live[level].intr.width
            view = RenderedView(start.depth[::st, ::st][:h, :w], start.normals[::st, ::st][:h, :w],
                                start.color[::st, ::st][:h, :w], start.pose, live[level].intr)
        else:
            view = render_model(model, at, live[level].intr, cfg.depth_range)
        return view, intensity_from_rgb(view.color)

    for k, level in enumerate(range(n_levels - 1, -1, -1)):
        lv = live[level]
        predicted, pred_gray = predict(level, pose)
        if level == 0 and pose is not prev_pose:
            # never refine from a coarse result that fits the finest level worse than the guess
            c0 = find_correspondences(lv, start, prev_pose, cfg)
            c1 = find_correspondences(lv, predicted, pose, cfg)
            if len(c0) >= 6 and (len(c1) < 6 or _linearize(lv, start, intensity_from_rgb(start.color), prev_pose,
                                                            c0, cfg)[1] <= _linearize(lv, predicted, pred_gray, pose, c1, cfg)[1]):
                pose = prev_pose
                predicted, pred_gray = predict(0, pose)
        history = []
        damping = 0.0
        prev_energy = np.inf
        last_pose, prev_sys = pose, None
        n_corr = 0
        it = 0
        rms = float("nan")
        for it in range(iters[k]):
            corrs = find_correspondences(lv, predicted, pose, cfg)
            if len(corrs) < 6:
                n_corr = len(corrs)
                break
            system, energy, geo_rms = _linearize(lv, predicted, pred_gray, pose, corrs, cfg)
            if energy > prev_energy and prev_sys is not None:
                # diverging step: back off and damp
                pose = last_pose
                damping = cfg.lm_tau * np.max(np.diag(prev_sys.A)) if damping == 0 else damping * 10
                system = prev_sys
            else:
                history.append(energy)
                n_corr, rms = len(corrs), geo_rms
                damping = damping / 10 if damping > 1e-12 else 0.0
                prev_energy, last_pose, prev_sys = energy, pose, system
            try:
                h = solve_step(system, damping)
            except DegenerateGeometryError:
                damping = cfg.lm_tau * max(np.max(np.diag(system.A)), 1e-12)
                h = solve_step(system, damping)
            pose = twist_to_transform(h, cfg.update_mode) @ pose
            if np.linalg.norm(h) < cfg.step_tol:
                # converged against this render; if the estimate has moved since, the
                # association is stale, so re-render at the current estimate and go on
                moved = (predicted.pose.inverse() @ pose)
                if it + 1 < iters[k] and (np.linalg.norm(moved.translation) > cfg.step_tol
                                          or moved.rotation_angle() > cfg.step_tol):
                    predicted, pred_gray = predict(level, pose)
                    damping, prev_energy, prev_sys = 0.0, np.inf, None
                    continue
                break
        stats.append(LevelStats(level, it + 1, n_corr, rms, history))
        log.debug("level %d: %d corrs, rms %.5f", level, n_corr, rms)
    if stats[-1].correspondences < cfg.min_correspondences:
        raise TrackingFailure(
            f"only {stats[-1].correspondences} correspondences at the finest level "
            f"(need {cfg.min_correspondences})")
    return TrackResult(pose, stats)
