"""Linear, bilinear and trilinear interpolation inside one lattice cell, plus
vectorized bilinear image sampling."""
import numpy as np


class OutOfCellError(ValueError):
    pass


def _fraction(x, lo, hi):
    if hi == lo:
        raise ValueError("degenerate cell: zero corner spacing")
    t = (x - lo) / (hi - lo)
    if t < -1e-12 or t > 1 + 1e-12:
        raise OutOfCellError(f"query {x} outside cell [{lo}, {hi}]")
    return t


def interpolate1d(values, bounds, x) -> float:
    """values = (psi(a), psi(b)), bounds = (a, b)."""
    t = _fraction(x, *bounds)
    return values[0] * (1 - t) + values[1] * t


def interpolate2d(values, bounds, point) -> float:
    """values[i][j] is the corner at (x_i, y_j); bounds = ((x0, x1), (y0, y1))."""
    tx = _fraction(point[0], *bounds[0])
    ty = _fraction(point[1], *bounds[1])
    v = np.asarray(values, dtype=float)
    lower = v[0, 0] * (1 - tx) + v[1, 0] * tx
    upper = v[0, 1] * (1 - tx) + v[1, 1] * tx
    return lower * (1 - ty) + upper * ty


def interpolate3d(values, bounds, point) -> float:
    """values[i][j][k] is the corner at (x_i, y_j, z_k)."""
    xd = _fraction(point[0], *bounds[0])
    yd = _fraction(point[1], *bounds[1])
    zd = _fraction(point[2], *bounds[2])
    v = np.asarray(values, dtype=float)
    # collapse x, then y, then z
    c = v[0] * (1 - xd) + v[1] * xd
    c = c[0] * (1 - yd) + c[1] * yd
    return c[0] * (1 - zd) + c[1] * zd


def bilinear_sample(img: np.ndarray, u, v, with_gradient: bool = False):
    """Sample `img` at float pixel coordinates (u = column, v = row).

    Coordinates must lie in [0, W-1] x [0, H-1]. With ``with_gradient`` the
    exact partial derivatives of the bilinear interpolant are returned too.
    """
    h, w = img.shape[:2]
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu = u - u0
    fv = v - v0
    i00 = img[v0, u0]
    i01 = img[v0, u0 + 1]
    i10 = img[v0 + 1, u0]
    i11 = img[v0 + 1, u0 + 1]
    top = i00 * (1 - fu) + i01 * fu
    bot = i10 * (1 - fu) + i11 * fu
    val = top * (1 - fv) + bot * fv
    if not with_gradient:
        return val
    gu = (i01 - i00) * (1 - fv) + (i11 - i10) * fv
    gv = bot - top
    return val, gu, gv
