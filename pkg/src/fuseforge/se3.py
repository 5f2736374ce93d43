"""Rigid motions and the twist parameterization (alpha, beta, gamma, x, y, z)."""
from dataclasses import dataclass, field

import numpy as np


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _polar_orthonormalize(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply `other` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def rotation_angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(np.allclose(r @ r.T, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) < tol)


def _coeffs(theta: float):
    """A = sin(t)/t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3 without cancellation."""
    if theta < 1e-2:
        t2 = theta * theta
        return 1 - t2 / 6 + t2 * t2 / 120, 0.5 - t2 / 24 + t2 * t2 / 720, 1 / 6 - t2 / 120 + t2 * t2 / 5040
    s = np.sin(theta / 2)
    return np.sin(theta) / theta, 2 * s * s / theta**2, (theta - np.sin(theta)) / theta**3


def so3_exp(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    a, b, _ = _coeffs(np.linalg.norm(w))
    k = skew(w)
    return np.eye(3) + a * k + b * k @ k


def twist_to_transform(xi, mode: str = "exact") -> RigidTransform:
    """Map a twist (alpha, beta, gamma, x, y, z) to a rigid transform.

    ``exact`` is the SE(3) matrix exponential. ``small-angle`` uses the
    linearized rotation [[1, -g, b], [g, 1, -a], [-b, a, 1]] with translation
    (x, y, z), projected back onto SO(3).
    """
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    if mode == "small-angle":
        a, b, g = w
        r = np.array([[1.0, -g, b], [g, 1.0, -a], [-b, a, 1.0]])
        return RigidTransform(_polar_orthonormalize(r), v.copy())
    if mode != "exact":
        raise ValueError(f"unknown twist mode {mode!r}")
    a, b, c = _coeffs(np.linalg.norm(w))
    k = skew(w)
    kk = k @ k
    return RigidTransform(np.eye(3) + a * k + b * kk, (np.eye(3) + b * k + c * kk) @ v)


def transform_to_twist(t: RigidTransform) -> np.ndarray:
    """Inverse of the exact exponential (SE(3) logarithm)."""
    r = t.rotation
    theta = t.rotation_angle()
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if np.pi - theta < 1e-6:
        # axis from the symmetric part
        b = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(b), 0.0, None))
        i = int(np.argmax(axis))
        axis = b[:, i] / axis[i]
        w = theta * axis / np.linalg.norm(axis)
    else:
        a = _coeffs(theta)[0]
        w = vee / (2 * a)
    theta = np.linalg.norm(w)
    k = skew(w)
    # V^-1 = I - K/2 + D K^2, D = (1 - A / (2B)) / t^2
    if theta < 1e-2:
        t2 = theta * theta
        d = 1 / 12 + t2 / 720 + t2 * t2 / 30240
    else:
        a, b, _ = _coeffs(theta)
        d = (1 - a / (2 * b)) / theta**2
    return np.concatenate([w, (np.eye(3) - 0.5 * k + d * k @ k) @ t.translation])


def rotation_error_deg(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.degrees((a.inverse() @ b).rotation_angle()))


def translation_error(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))
