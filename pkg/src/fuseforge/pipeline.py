"""End-to-end drivers: rigid fusion over an RGB-D sequence and the planar
non-rigid registration experiment."""
from dataclasses import dataclass, field
import logging
import time

import numpy as np

from .camera import PinholeIntrinsics
from .config import RunConfig
from .datasets import TrajectorySample, read_color_png, read_depth_png
from .defgraph import DeformationGraph, build_graph, warp_mesh
from .imageproc import bilateral_filter, build_pyramid
from .nonrigid import WarpResult, solve_warp_field
from .se3 import RigidTransform
from .surface import TriangleMesh
from .synthetic import apply_synthetic_deformation, generate_synthetic_plane
from .tracking import TrackingFailure, track_frame
from .volume import HashedTsdfVolume

log = logging.getLogger(__name__)


@dataclass
class FrameStats:
    index: int
    timestamp: float
    status: str
    correspondences: int
    residual_rms: float
    iterations: int
    seconds: float


@dataclass
class RigidRun:
    trajectory: list
    volume: HashedTsdfVolume
    stats: list = field(default_factory=list)

    def stats_csv(self) -> str:
        """Deterministic per-frame statistics (wall-clock times live in timing_csv)."""
        lines = ["frame,timestamp,status,correspondences,residual_rms,iterations"]
        for s in self.stats:
            lines.append(f"{s.index},{s.timestamp:.6f},{s.status},{s.correspondences},"
                         f"{s.residual_rms:.9g},{s.iterations}")
        return "\n".join(lines) + "\n"

    def timing_csv(self) -> str:
        return "frame,seconds\n" + "".join(f"{s.index},{s.seconds:.3f}\n" for s in self.stats)


def preprocess_depth(depth: np.ndarray, cfg: RunConfig) -> np.ndarray:
    d = np.where((depth >= cfg.preprocess.depth_min) & (depth <= cfg.preprocess.depth_max), depth, 0.0)
    if cfg.preprocess.bilateral:
        d = bilateral_filter(d, cfg.preprocess.sigma_spatial, cfg.preprocess.sigma_range)
    return d


def run_rigid(frames, intr: PinholeIntrinsics, cfg: RunConfig, continue_on_failure: bool = False,
              initial_pose: RigidTransform = None) -> RigidRun:
    """Track and fuse a sequence of (timestamp, depth, color) frames.

    The first frame fixes the world frame (or `initial_pose`). On tracking
    failure the previous pose is kept when `continue_on_failure` is set,
    otherwise TrackingFailure propagates.
    """
    vc = cfg.volume
    vol = HashedTsdfVolume(vc.voxel_size, vc.truncation, vc.w_max, vc.table_size)
    pose = initial_pose or RigidTransform.identity()
    run = RigidRun([], vol)
    for k, (ts, depth, color) in enumerate(frames):
        t0 = time.perf_counter()
        if depth.shape != (intr.height, intr.width):
            raise ValueError(f"frame {k}: image size {depth.shape[::-1]} does not match the camera "
                             f"({intr.width}x{intr.height})")
        raw = np.where((depth >= cfg.preprocess.depth_min) & (depth <= cfg.preprocess.depth_max), depth, 0.0)
        pyr = build_pyramid(preprocess_depth(depth, cfg), color, intr, cfg.preprocess.levels,
                            cfg.preprocess.normal_step)
        status, n_corr, rms, iters = "init", 0, 0.0, 0
        if k > 0:
            try:
                res = track_frame(pyr, vol, pose, cfg.tracker)
                pose = res.pose
                fin = res.stats[-1]
                status, n_corr, rms = "ok", fin.correspondences, fin.residual_rms
                iters = sum(s.iterations for s in res.stats)
            except TrackingFailure as exc:
                if not continue_on_failure:
                    raise TrackingFailure(f"frame {k} (t={ts:.6f}): {exc}") from exc
                status = "lost"
                log.warning("frame %d: %s; keeping previous pose", k, exc)
        vol.integrate_frame(raw, color, pose, intr, normals=pyr[0].normals)
        run.trajectory.append(TrajectorySample(float(ts), pose))
        run.stats.append(FrameStats(k, float(ts), status, n_corr, rms, iters, time.perf_counter() - t0))
        log.info("frame %d %s corr=%d rms=%.4f %.2fs", k, status, n_corr, rms, run.stats[-1].seconds)
    return run


def iter_dataset_frames(dataset_frames, max_frames: int = None):
    for k, f in enumerate(dataset_frames):
        if max_frames is not None and k >= max_frames:
            break
        yield f.timestamp, read_depth_png(f.depth_path), read_color_png(f.color_path)


# -- non-rigid experiment ------------------------------------------------------------

@dataclass
class NonRigidRun:
    source: TriangleMesh
    target: TriangleMesh
    graph: DeformationGraph
    result: WarpResult
    warped: TriangleMesh
    initial_distances: np.ndarray
    distances: np.ndarray

    def stats(self) -> dict:
        d = self.distances
        return {"max_distance": float(d.max()), "mean_distance": float(d.mean()), "std_distance": float(d.std())}

    def stats_csv(self) -> str:
        s = self.stats()
        d0 = self.initial_distances
        return ("max_distance,mean_distance,std_distance,initial_max_distance,iterations\n"
                f"{s['max_distance']:.9e},{s['mean_distance']:.9e},{s['std_distance']:.9e},"
                f"{d0.max():.9e},{self.result.iterations}\n")


def synthetic_mesh(spec: str, cfg: RunConfig) -> TriangleMesh:
    """'plane' or 'plane:<kind>[:<amplitude>]' on the configured grid."""
    parts = spec.split(":")
    if parts[0] != "plane" or len(parts) > 3:
        raise ValueError(f"bad synthetic mesh spec {spec!r}")
    sc = cfg.suite
    mesh = generate_synthetic_plane(sc.rows, sc.cols, sc.extent)
    if len(parts) >= 2:
        amp = float(parts[2]) if len(parts) == 3 else sc.amplitude
        mesh = apply_synthetic_deformation(mesh, parts[1], amp, cfg.seed)
    return mesh


def run_nonrigid(source: TriangleMesh, target: TriangleMesh, cfg: RunConfig) -> NonRigidRun:
    """Index-mode registration of two meshes with shared topology."""
    if source.n_vertices != target.n_vertices or not np.array_equal(source.faces, target.faces):
        raise ValueError("source and target must share topology for index association")
    gc = cfg.graph
    n = min(gc.node_count, source.n_vertices)
    graph = build_graph(source, n, gc.k, cfg.seed, gc.radius_scale)
    res = solve_warp_field(graph, source, target, cfg.nonrigid)
    warped = warp_mesh(res.graph, source)
    d0 = np.linalg.norm(source.vertices - target.vertices, axis=1)
    d = np.linalg.norm(warped.vertices - target.vertices, axis=1)
    return NonRigidRun(source, target, res.graph, res, warped, d0, d)
