"""Quaternion / dual-quaternion algebra and dual-quaternion linear blending.

Quaternions are stored scalar-first (w, x, y, z). Batched helpers work on
arrays whose last axis holds 4 (quaternion) or 8 (real | dual) values.
"""
from dataclasses import dataclass

import numpy as np

from .se3 import RigidTransform


class DegenerateBlendError(ValueError):
    pass


_CONJ = np.array([1.0, -1.0, -1.0, -1.0])


def qmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def qconj(q) -> np.ndarray:
    return np.asarray(q, dtype=float) * _CONJ


def qleft(q) -> np.ndarray:
    """Matrix L(q) with qmul(q, p) == L(q) @ p."""
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


def qright(q) -> np.ndarray:
    """Matrix R(q) with qmul(p, q) == R(q) @ p."""
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]])


def quat_from_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def matrix_from_quat(q) -> np.ndarray:
    """Rotation matrix of unit quaternion(s) (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class DualQuaternion:
    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "real", np.asarray(self.real, dtype=float).reshape(4))
        object.__setattr__(self, "dual", np.asarray(self.dual, dtype=float).reshape(4))

    @classmethod
    def identity(cls) -> "DualQuaternion":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(4))

    @classmethod
    def from_array(cls, a) -> "DualQuaternion":
        a = np.asarray(a, dtype=float)
        return cls(a[:4], a[4:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.real, self.dual])

    def __mul__(self, other: "DualQuaternion") -> "DualQuaternion":
        return DualQuaternion(
            qmul(self.real, other.real),
            qmul(self.real, other.dual) + qmul(self.dual, other.real),
        )

    def normalized(self) -> "DualQuaternion":
        return DualQuaternion.from_array(normalize_dq(self.as_array()))


def normalize_dq(b) -> np.ndarray:
    """Project (..., 8) dual quaternions onto unit rigid motions.

    Real part scaled to unit length, dual part scaled likewise and made
    orthogonal to the real part.
    """
    b = np.asarray(b, dtype=float)
    r, d = b[..., :4], b[..., 4:]
    s = np.linalg.norm(r, axis=-1, keepdims=True)
    r = r / s
    d = d / s
    d = d - r * np.sum(r * d, axis=-1, keepdims=True)
    return np.concatenate([r, d], axis=-1)


def dq_from_transform(t: RigidTransform) -> DualQuaternion:
    r = quat_from_matrix(t.rotation)
    tq = np.concatenate([[0.0], t.translation])
    return DualQuaternion(r, 0.5 * qmul(tq, r))


def dq_to_transform(dq: DualQuaternion) -> RigidTransform:
    rot, trans = dq_array_to_rt(dq.as_array())
    return RigidTransform(rot, trans)


def dq_array_to_rt(b):
    """(..., 8) -> rotation (..., 3, 3), translation (..., 3); normalizes first."""
    q = normalize_dq(b)
    r, d = q[..., :4], q[..., 4:]
    t = 2.0 * qmul(d, qconj(r))[..., 1:]
    return matrix_from_quat(r), t


def dq_array_from_transforms(rotations, translations) -> np.ndarray:
    rots = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
    trans = np.asarray(translations, dtype=float).reshape(-1, 3)
    out = np.empty((len(rots), 8))
    for i, (r, t) in enumerate(zip(rots, trans)):
        out[i] = dq_from_transform(RigidTransform(r, t)).as_array()
    return out


def dq_from_twists(xis) -> np.ndarray:
    """(n, 8) dual quaternions of exp(xi) for twists (n, 6) (alpha, beta, gamma, x, y, z)."""
    xi = np.asarray(xis, dtype=float).reshape(-1, 6)
    w, v = xi[:, :3], xi[:, 3:]
    th = np.linalg.norm(w, axis=1)
    t2 = th * th
    small = th < 1e-2
    ts = np.where(small, 1.0, th)
    half_sinc = np.where(small, 0.5 - t2 / 48 + t2 * t2 / 3840, np.sin(ts / 2) / ts)
    c1 = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, 2 * np.sin(ts / 2) ** 2 / ts**2)
    c2 = np.where(small, 1 / 6 - t2 / 120 + t2 * t2 / 5040, (ts - np.sin(ts)) / ts**3)
    wv = np.cross(w, v)
    t = v + c1[:, None] * wv + c2[:, None] * np.cross(w, wv)
    real = np.concatenate([np.cos(th / 2)[:, None], half_sinc[:, None] * w], axis=1)
    tq = np.concatenate([np.zeros((len(t), 1)), t], axis=1)
    return np.concatenate([real, 0.5 * qmul(tq, real)], axis=1)


def align_signs(dqs) -> np.ndarray:
    """Per-row sign (+1/-1) making each real part agree with the first one.

    `dqs` has shape (..., K, 8); the returned array has shape (..., K).
    """
    dqs = np.asarray(dqs, dtype=float)
    dots = np.sum(dqs[..., :4] * dqs[..., :1, :4], axis=-1)
    return np.where(dots < 0, -1.0, 1.0)


def blend_arrays(weights, dqs) -> np.ndarray:
    """Unnormalized sign-aligned weighted sum; weights (..., K), dqs (..., K, 8)."""
    w = np.asarray(weights, dtype=float)
    dqs = np.asarray(dqs, dtype=float)
    signs = align_signs(dqs)
    return np.sum((w * signs)[..., None] * dqs, axis=-2)


def dqlb(weights, dqs) -> DualQuaternion:
    """Dual-quaternion linear blend: normalized weighted sum of `dqs`."""
    w = np.asarray(weights, dtype=float)
    if len(dqs) == 0 or len(w) != len(dqs):
        raise ValueError("weights and dual quaternions must be equal-length and non-empty")
    if not np.sum(w) > 0:
        raise DegenerateBlendError("blend weights sum to zero")
    arr = np.stack([dq.as_array() if isinstance(dq, DualQuaternion) else np.asarray(dq, float) for dq in dqs])
    b = blend_arrays(w, arr)
    if np.linalg.norm(b[:4]) == 0:
        raise DegenerateBlendError("blend collapsed to zero real part")
    return DualQuaternion.from_array(normalize_dq(b))


def blended_point_jacobian(b, x) -> np.ndarray:
    """Derivative (3, 8) of the point produced by the normalized blend `b` acting on `x`.

    With s^2 = |b_r|^2 the transformed point is
    vec(b_r x b_r* + 2 b_d b_r*) / s^2, which is differentiable in the raw
    8-vector b, so no explicit normalization step enters the chain.
    """
    b = np.asarray(b, dtype=float)
    r, d = b[:4], b[4:]
    xq = np.concatenate([[0.0], np.asarray(x, dtype=float)])
    c = np.diag(_CONJ)
    rc = qconj(r)
    s2 = r @ r
    g = qmul(qmul(r, xq), rc) + 2.0 * qmul(d, rc)
    dg_dr = qright(qmul(xq, rc)) + qleft(qmul(r, xq)) @ c + 2.0 * qleft(d) @ c
    dg_dd = 2.0 * qright(rc)
    jr = dg_dr[1:] / s2 - np.outer(g[1:], 2.0 * r) / s2**2
    jd = dg_dd[1:] / s2
    return np.hstack([jr, jd])


# derivative of dq(exp(xi)) at xi = 0, rows (real | dual), cols (alpha..z)
TWIST_TO_DQ = np.zeros((8, 6))
TWIST_TO_DQ[1:4, 0:3] = 0.5 * np.eye(3)
TWIST_TO_DQ[5:8, 3:6] = 0.5 * np.eye(3)


def left_perturbation_jacobian(q) -> np.ndarray:
    """d(dq(exp(xi)) * q)/d xi at xi = 0, shape (8, 6)."""
    q = np.asarray(q, dtype=float)
    qr, qd = q[:4], q[4:]
    er = TWIST_TO_DQ[:4]
    ed = TWIST_TO_DQ[4:]
    top = qright(qr) @ er
    bottom = qright(qd) @ er + qright(qr) @ ed
    return np.vstack([top, bottom])
