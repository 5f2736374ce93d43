"""Trajectory error metrics: absolute trajectory error and relative pose error."""
import numpy as np

from .datasets import associate_timestamps
from .se3 import RigidTransform


class MetricError(ValueError):
    pass


def horn_alignment(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Rigid T minimizing sum |T src_i - dst_i|^2 (closed form via SVD)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    h = (src - ms).T @ (dst - md)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    return RigidTransform(r, md - r @ ms)


def _associated(estimated, reference, tolerance):
    pairs = associate_timestamps([s.timestamp for s in estimated], [s.timestamp for s in reference], tolerance)
    if not pairs:
        raise MetricError("no associated trajectory pairs")
    return [estimated[i].pose for i, _ in pairs], [reference[j].pose for _, j in pairs]


def evaluate_ate_rmse(estimated, reference, align: bool = True, tolerance: float = 0.02) -> float:
    """RMS of translation differences over time-associated pairs."""
    est, ref = _associated(estimated, reference, tolerance)
    pe = np.array([p.translation for p in est])
    pr = np.array([p.translation for p in ref])
    if align and len(pe) >= 3:
        pe = horn_alignment(pe, pr).apply(pe)
    elif align:
        pe = pe - pe.mean(axis=0) + pr.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((pe - pr) ** 2, axis=1))))


def evaluate_rpe(estimated, reference, delta: int = 1, tolerance: float = 0.02):
    """Per-pair translational relative errors and their RMSE.

    E_i = (Q_i^-1 Q_{i+d})^-1 (P_i^-1 P_{i+d}) over associated samples, with
    `delta` counted in associated frames.
    """
    if delta < 1:
        raise MetricError("delta must be >= 1")
    est, ref = _associated(estimated, reference, tolerance)
    if len(est) < delta + 1:
        raise MetricError(f"need at least {delta + 1} associated samples, have {len(est)}")
    errs = np.empty(len(est) - delta)
    for i in range(len(errs)):
        de = est[i].inverse() @ est[i + delta]
        dr = ref[i].inverse() @ ref[i + delta]
        errs[i] = np.linalg.norm((dr.inverse() @ de).translation)
    return errs, float(np.sqrt(np.mean(errs**2)))
