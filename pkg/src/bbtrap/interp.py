"""Interpolation of a regular 3D grid, shared by the trap and dynamics code.

Two kernels: trilinear (order 1) and Catmull-Rom tricubic (order 3).  The
tricubic kernel has a continuous gradient and reproduces quadratics
exactly, which matters for energy conservation in the integrator; it needs
one extra node on each side, so its valid domain is one cell smaller.

Grid convention: node (i, j, k) sits at ``origin + (i, j, k) * pitch``.
Outside the grid the kernels report ``inside = False`` and return zeros.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def value_grad(values, ox, oy, oz, dx, dy, dz, x, y, z, out):
    """Interpolated value and gradient at (x, y, z); returns False outside the grid.

    ``out`` receives (U, dU/dx, dU/dy, dU/dz).
    """
    nx, ny, nz = values.shape
    fx = (x - ox) / dx
    fy = (y - oy) / dy
    fz = (z - oz) / dz
    if fx < 0.0 or fy < 0.0 or fz < 0.0 or fx > nx - 1 or fy > ny - 1 or fz > nz - 1:
        out[0] = 0.0
        out[1] = 0.0
        out[2] = 0.0
        out[3] = 0.0
        return False
    i = min(int(fx), nx - 2)
    j = min(int(fy), ny - 2)
    k = min(int(fz), nz - 2)
    tx = fx - i
    ty = fy - j
    tz = fz - k
    c000 = values[i, j, k]
    c100 = values[i + 1, j, k]
    c010 = values[i, j + 1, k]
    c110 = values[i + 1, j + 1, k]
    c001 = values[i, j, k + 1]
    c101 = values[i + 1, j, k + 1]
    c011 = values[i, j + 1, k + 1]
    c111 = values[i + 1, j + 1, k + 1]
    # along x
    c00 = c000 + (c100 - c000) * tx
    c10 = c010 + (c110 - c010) * tx
    c01 = c001 + (c101 - c001) * tx
    c11 = c011 + (c111 - c011) * tx
    # along y
    c0 = c00 + (c10 - c00) * ty
    c1 = c01 + (c11 - c01) * ty
    out[0] = c0 + (c1 - c0) * tz
    out[3] = (c1 - c0) / dz
    d00 = c100 - c000
    d10 = c110 - c010
    d01 = c101 - c001
    d11 = c111 - c011
    d0 = d00 + (d10 - d00) * ty
    d1 = d01 + (d11 - d01) * ty
    out[1] = (d0 + (d1 - d0) * tz) / dx
    e0 = c10 - c00
    e1 = c11 - c01
    out[2] = (e0 + (e1 - e0) * tz) / dy
    return True


@nb.njit(cache=True, inline="always")
def _cr_weights(t, w, dw):
    t2 = t * t
    t3 = t2 * t
    w[0] = 0.5 * (-t3 + 2.0 * t2 - t)
    w[1] = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0)
    w[2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + t)
    w[3] = 0.5 * (t3 - t2)
    dw[0] = 0.5 * (-3.0 * t2 + 4.0 * t - 1.0)
    dw[1] = 0.5 * (9.0 * t2 - 10.0 * t)
    dw[2] = 0.5 * (-9.0 * t2 + 8.0 * t + 1.0)
    dw[3] = 0.5 * (3.0 * t2 - 2.0 * t)


@nb.njit(cache=True)
def value_grad_cubic(values, ox, oy, oz, dx, dy, dz, x, y, z, out):
    """Catmull-Rom tricubic counterpart of :func:`value_grad`."""
    nx, ny, nz = values.shape
    fx = (x - ox) / dx
    fy = (y - oy) / dy
    fz = (z - oz) / dz
    if fx < 1.0 or fy < 1.0 or fz < 1.0 or fx > nx - 2 or fy > ny - 2 or fz > nz - 2:
        out[0] = 0.0
        out[1] = 0.0
        out[2] = 0.0
        out[3] = 0.0
        return False
    i = min(int(fx), nx - 3)
    j = min(int(fy), ny - 3)
    k = min(int(fz), nz - 3)
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    gx = np.empty(4)
    gy = np.empty(4)
    gz = np.empty(4)
    _cr_weights(fx - i, wx, gx)
    _cr_weights(fy - j, wy, gy)
    _cr_weights(fz - k, wz, gz)
    u = 0.0
    ux = 0.0
    uy = 0.0
    uz = 0.0
    for a in range(4):
        for b in range(4):
            for c in range(4):
                v = values[i - 1 + a, j - 1 + b, k - 1 + c]
                u += wx[a] * wy[b] * wz[c] * v
                ux += gx[a] * wy[b] * wz[c] * v
                uy += wx[a] * gy[b] * wz[c] * v
                uz += wx[a] * wy[b] * gz[c] * v
    out[0] = u
    out[1] = ux / dx
    out[2] = uy / dy
    out[3] = uz / dz
    return True


@nb.njit(cache=True, inline="always")
def lookup(order, values, ox, oy, oz, dx, dy, dz, x, y, z, out):
    if order == 3:
        return value_grad_cubic(values, ox, oy, oz, dx, dy, dz, x, y, z, out)
    return value_grad(values, ox, oy, oz, dx, dy, dz, x, y, z, out)


ORDERS = {"trilinear": 1, "tricubic": 3}


def order_of(interpolation: str) -> int:
    try:
        return ORDERS[interpolation]
    except KeyError:
        raise ValueError(f"interpolation must be one of {sorted(ORDERS)}, got {interpolation!r}") from None


@nb.njit(cache=True)
def _sample_many(values, ox, oy, oz, dx, dy, dz, pts, with_grad, order):
    n = pts.shape[0]
    res = np.zeros((n, 4))
    inside = np.zeros(n, dtype=np.bool_)
    buf = np.zeros(4)
    for p in range(n):
        inside[p] = lookup(order, values, ox, oy, oz, dx, dy, dz, pts[p, 0], pts[p, 1], pts[p, 2], buf)
        res[p, 0] = buf[0]
        if with_grad:
            res[p, 1] = buf[1]
            res[p, 2] = buf[2]
            res[p, 3] = buf[3]
    return res, inside


def sample(values, origin, pitches, points, with_grad=False, interpolation="trilinear"):
    """Vectorized grid lookup.

    Returns ``(u, inside)`` or ``(u, grad, inside)`` when ``with_grad``.
    """
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    res, inside = _sample_many(
        np.ascontiguousarray(values), *map(float, origin), *map(float, pitches), pts, with_grad,
        order_of(interpolation),
    )
    if with_grad:
        return res[:, 0], res[:, 1:], inside
    return res[:, 0], inside
