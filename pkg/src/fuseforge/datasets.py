"""TUM RGB-D list files, trajectories and image loading."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dualquat import matrix_from_quat, quat_from_matrix
from .se3 import RigidTransform

DEPTH_SCALE = 5000.0


class DatasetError(ValueError):
    pass


@dataclass
class TrajectorySample:
    timestamp: float
    pose: RigidTransform  # camera -> world


@dataclass
class DatasetFrame:
    timestamp: float
    depth_path: Path
    color_path: Path
    gt_pose: RigidTransform = None


def _read_list(path: Path, ncols: int):
    """Parse a TUM list file: '#' comments, whitespace-separated columns."""
    rows = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) < ncols:
            raise DatasetError(f"{path}:{lineno}: expected {ncols} columns, got {len(parts)}")
        try:
            ts = float(parts[0])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from exc
        rows.append((lineno, ts, parts[1:]))
    return rows


def read_trajectory(path) -> list:
    """'timestamp tx ty tz qx qy qz qw' lines; quaternions are normalized."""
    out = []
    for lineno, ts, rest in _read_list(path, 8):
        try:
            vals = np.array([float(v) for v in rest[:7]])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: unparseable pose values") from exc
        q = np.array([vals[6], vals[3], vals[4], vals[5]])  # scalar first
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise DatasetError(f"{path}:{lineno}: zero quaternion")
        out.append(TrajectorySample(ts, RigidTransform(matrix_from_quat(q / n), vals[:3])))
    return out


def format_trajectory(samples) -> str:
    lines = []
    for s in samples:
        q = quat_from_matrix(s.pose.rotation)
        t = s.pose.translation
        lines.append(f"{s.timestamp:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                     f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_trajectory(samples, path):
    Path(path).write_text(format_trajectory(samples))


def associate_timestamps(a, b, tolerance: float = 0.02):
    """Greedy one-to-one nearest matching of sorted timestamp arrays.

    Returns index pairs (i, j) with |a_i - b_j| <= tolerance, ordered by i.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return []
    cand = []
    for i, t in enumerate(a):
        j = int(np.searchsorted(b, t))
        for jj in (j - 1, j):
            if 0 <= jj < len(b) and abs(b[jj] - t) <= tolerance:
                cand.append((abs(b[jj] - t), i, jj))
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def load_tum_dataset(root, assoc_tolerance: float = 0.02):
    """Frames with matched depth and color plus the ground-truth trajectory
    (empty when groundtruth.txt is absent)."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    for name in ("depth.txt", "rgb.txt"):
        if not (root / name).is_file():
            raise DatasetError(f"missing {root / name}")
    depth = _read_list(root / "depth.txt", 2)
    rgb = _read_list(root / "rgb.txt", 2)
    gt = read_trajectory(root / "groundtruth.txt") if (root / "groundtruth.txt").is_file() else []
    dts = np.array([r[1] for r in depth])
    cts = np.array([r[1] for r in rgb])
    pairs = associate_timestamps(dts, cts, assoc_tolerance)
    gts = np.array([s.timestamp for s in gt])
    frames = []
    for i, j in pairs:
        ts = dts[i]
        pose = None
        if len(gt):
            k = int(np.argmin(np.abs(gts - ts)))
            if abs(gts[k] - ts) <= assoc_tolerance:
                pose = gt[k].pose
        frames.append(DatasetFrame(ts, root / depth[i][2][0], root / rgb[j][2][0], pose))
    return frames, gt


def read_depth_png(path, scale: float = DEPTH_SCALE) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.float64)
    return raw / scale


def write_depth_png(path, depth: np.ndarray, scale: float = DEPTH_SCALE):
    raw = np.clip(np.round(np.asarray(depth) * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_color_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_color_png(path, color: np.ndarray):
    Image.fromarray(np.asarray(color, dtype=np.uint8)).save(path)


def write_tum_sequence(root, timestamps, depths, colors, gt_poses=None):
    """Write frames as a TUM-format directory (depth/, rgb/, list files)."""
    root = Path(root)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    dl, cl = ["# depth maps"], ["# color images"]
    for ts, d, c in zip(timestamps, depths, colors):
        name = f"{ts:.6f}.png"
        write_depth_png(root / "depth" / name, d)
        write_color_png(root / "rgb" / name, c)
        dl.append(f"{ts:.6f} depth/{name}")
        cl.append(f"{ts:.6f} rgb/{name}")
    (root / "depth.txt").write_text("\n".join(dl) + "\n")
    (root / "rgb.txt").write_text("\n".join(cl) + "\n")
    if gt_poses is not None:
        text = format_trajectory([TrajectorySample(t, p) for t, p in zip(timestamps, gt_poses)])
        (root / "groundtruth.txt").write_text("# timestamp tx ty tz qx qy qz qw\n" + text)
