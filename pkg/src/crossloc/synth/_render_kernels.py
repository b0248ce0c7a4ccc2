"""Compiled ray casting against the analytic scene primitives.

Primitive table rows: [kind, cx, cy, cz, yaw, a, b, h, r, sid]
  kind 0 box: footprint half sizes (a, b) around (cx, cy), rotated by yaw, z in [0, h]
  kind 1 cylinder: vertical axis at (cx, cy), radius r, z in [0, h]
  kind 2 sphere: center (cx, cy, cz), radius r
Texture table rows (per structure id): 3 waves of [kx, ky, kz, phase].
"""
from __future__ import annotations

import numpy as np
from numba import njit

EPS = 1e-9
BOX, CYLINDER, SPHERE = 0, 1, 2


@njit(cache=True)
def _texture(tex, sid, x, y, z):
    s = 0.0
    for w in range(3):
        k = 4 * w
        s += np.sin(tex[sid, k] * x + tex[sid, k + 1] * y + tex[sid, k + 2] * z + tex[sid, k + 3])
    return s / 3.0


@njit(cache=True)
def shade(tex, light, noise, sid, x, y, z, nx, ny, nz):
    v = 0.5 + 0.3 * (nx * light[0] + ny * light[1] + nz * light[2]) + noise * _texture(tex, sid, x, y, z)
    return min(1.0, max(0.0, v))


@njit(cache=True)
def shade_points(tex, light, noise, sid, P, N):
    out = np.empty(len(P))
    for i in range(len(P)):
        out[i] = shade(tex, light, noise, sid[i], P[i, 0], P[i, 1], P[i, 2], N[i, 0], N[i, 1], N[i, 2])
    return out


@njit(cache=True)
def _hit_box(p, ox, oy, oz, dx, dy, dz):
    c, s = np.cos(p[4]), np.sin(p[4])
    # ray in the box frame
    rx, ry = ox - p[1], oy - p[2]
    lox, loy = c * rx + s * ry, -s * rx + c * ry
    ldx, ldy = c * dx + s * dy, -s * dx + c * dy
    lo = (lox, loy, oz)
    ld = (ldx, ldy, dz)
    lo_b = (-p[5], -p[6], 0.0)
    hi_b = (p[5], p[6], p[7])
    tn, tf = -np.inf, np.inf
    axis, sign = -1, 0.0
    for k in range(3):
        if abs(ld[k]) < 1e-15:
            if lo[k] < lo_b[k] or lo[k] > hi_b[k]:
                return np.inf, 0.0, 0.0, 0.0
            continue
        t1 = (lo_b[k] - lo[k]) / ld[k]
        t2 = (hi_b[k] - lo[k]) / ld[k]
        sgn = -1.0
        if t1 > t2:
            t1, t2 = t2, t1
            sgn = 1.0
        if t1 > tn:
            tn, axis, sign = t1, k, sgn
        if t2 < tf:
            tf = t2
    if tn > tf or tn <= EPS or axis < 0:
        return np.inf, 0.0, 0.0, 0.0
    if axis == 2:
        return tn, 0.0, 0.0, sign
    lnx = sign if axis == 0 else 0.0
    lny = sign if axis == 1 else 0.0
    return tn, c * lnx - s * lny, s * lnx + c * lny, 0.0


@njit(cache=True)
def _hit_cylinder(p, ox, oy, oz, dx, dy, dz):
    best, nx, ny, nz = np.inf, 0.0, 0.0, 0.0
    rx, ry, r, h = ox - p[1], oy - p[2], p[8], p[7]
    a = dx * dx + dy * dy
    if a > 1e-18:
        b = rx * dx + ry * dy
        cc = rx * rx + ry * ry - r * r
        disc = b * b - a * cc
        if disc >= 0.0:
            t = (-b - np.sqrt(disc)) / a
            if t > EPS:
                z = oz + t * dz
                if 0.0 <= z <= h:
                    best = t
                    nx, ny = (rx + t * dx) / r, (ry + t * dy) / r
    if abs(dz) > 1e-15:
        t = (h - oz) / dz
        if EPS < t < best:
            qx, qy = rx + t * dx, ry + t * dy
            if qx * qx + qy * qy <= r * r:
                best, nx, ny, nz = t, 0.0, 0.0, 1.0 if oz > h else -1.0
    return best, nx, ny, nz


@njit(cache=True)
def _hit_sphere(p, ox, oy, oz, dx, dy, dz):
    rx, ry, rz, r = ox - p[1], oy - p[2], oz - p[3], p[8]
    b = rx * dx + ry * dy + rz * dz
    cc = rx * rx + ry * ry + rz * rz - r * r
    disc = b * b - cc
    if disc < 0.0:
        return np.inf, 0.0, 0.0, 0.0
    t = -b - np.sqrt(disc)
    if t <= EPS:
        return np.inf, 0.0, 0.0, 0.0
    return t, (rx + t * dx) / r, (ry + t * dy) / r, (rz + t * dz) / r


@njit(cache=True)
def cast(prims, active, ox, oy, oz, dx, dy, dz, ground):
    """Nearest hit along one unit ray: (t, nx, ny, nz, sid); t = inf on a miss."""
    best, bnx, bny, bnz, bsid = np.inf, 0.0, 0.0, 0.0, -1
    if ground and dz < -1e-15:
        t = -oz / dz
        if t > EPS:
            best, bnz, bsid = t, 1.0, 0
    for j in active:
        p = prims[j]
        kind = int(p[0])
        if kind == BOX:
            t, nx, ny, nz = _hit_box(p, ox, oy, oz, dx, dy, dz)
        elif kind == CYLINDER:
            t, nx, ny, nz = _hit_cylinder(p, ox, oy, oz, dx, dy, dz)
        else:
            t, nx, ny, nz = _hit_sphere(p, ox, oy, oz, dx, dy, dz)
        if t < best:
            best, bnx, bny, bnz, bsid = t, nx, ny, nz, int(p[9])
    return best, bnx, bny, bnz, bsid


@njit(cache=True)
def render(prims, boxes, tex, light, noise, sky, Rt, c, fx, fy, cx, cy, W, H, ss):
    """Render one frame with ss x ss samples per pixel.

    Args:
        boxes: (n_prims, 4) screen-space bounds [u0, v0, u1, v1] per primitive;
            a primitive is tested only for samples inside its bounds.
        Rt: camera-to-world rotation; c: camera center.
    """
    img = np.empty((H, W))
    active = np.empty(len(prims), dtype=np.int64)
    inv = 1.0 / (ss * ss)
    for v in range(H):
        for u in range(W):
            na = 0
            for j in range(len(prims)):
                if boxes[j, 0] <= u + 0.5 and u - 0.5 <= boxes[j, 2] and boxes[j, 1] <= v + 0.5 and v - 0.5 <= boxes[j, 3]:
                    active[na] = j
                    na += 1
            acc = 0.0
            for sv in range(ss):
                for su in range(ss):
                    pu = u + (su + 0.5) / ss - 0.5
                    pv = v + (sv + 0.5) / ss - 0.5
                    x = (pu - cx) / fx
                    y = (pv - cy) / fy
                    dx = Rt[0, 0] * x + Rt[0, 1] * y + Rt[0, 2]
                    dy = Rt[1, 0] * x + Rt[1, 1] * y + Rt[1, 2]
                    dz = Rt[2, 0] * x + Rt[2, 1] * y + Rt[2, 2]
                    nrm = np.sqrt(dx * dx + dy * dy + dz * dz)
                    dx, dy, dz = dx / nrm, dy / nrm, dz / nrm
                    t, nx, ny, nz, sid = cast(prims, active[:na], c[0], c[1], c[2], dx, dy, dz, True)
                    if sid < 0:
                        acc += sky
                    else:
                        acc += shade(tex, light, noise, sid, c[0] + t * dx, c[1] + t * dy, c[2] + t * dz, nx, ny, nz)
            img[v, u] = acc * inv
    return img


@njit(cache=True)
def ray_depths(prims, c, dirs):
    """Distance to the first surface along each unit direction (all primitives tested)."""
    out = np.empty(len(dirs))
    active = np.arange(len(prims))
    for i in range(len(dirs)):
        out[i] = cast(prims, active, c[0], c[1], c[2], dirs[i, 0], dirs[i, 1], dirs[i, 2], True)[0]
    return out


@njit(cache=True)
def splat(uv, depth, inten, W, H, sky, depth_tol):
    """Z-buffered splatting with 2x2 bilinear footprints.

    A pixel keeps the contributions of points within ``depth_tol`` (relative)
    of its nearest contributing depth; uncovered pixels get ``sky``.
    Returns (image, weight sum, weighted projection offset sums (H, W, 2)).
    """
    zbuf = np.full((H, W), np.inf)
    for i in range(len(uv)):
        u0, v0 = int(np.floor(uv[i, 0])), int(np.floor(uv[i, 1]))
        for dv in range(2):
            for du in range(2):
                uu, vv = u0 + du, v0 + dv
                if 0 <= uu < W and 0 <= vv < H and depth[i] < zbuf[vv, uu]:
                    zbuf[vv, uu] = depth[i]
    acc = np.zeros((H, W))
    wsum = np.zeros((H, W))
    off = np.zeros((H, W, 2))
    for i in range(len(uv)):
        u0, v0 = int(np.floor(uv[i, 0])), int(np.floor(uv[i, 1]))
        fu, fv = uv[i, 0] - u0, uv[i, 1] - v0
        for dv in range(2):
            for du in range(2):
                uu, vv = u0 + du, v0 + dv
                if 0 <= uu < W and 0 <= vv < H and depth[i] <= zbuf[vv, uu] * (1.0 + depth_tol):
                    w = (fu if du else 1.0 - fu) * (fv if dv else 1.0 - fv)
                    acc[vv, uu] += w * inten[i]
                    wsum[vv, uu] += w
                    off[vv, uu, 0] += w * (uv[i, 0] - uu)
                    off[vv, uu, 1] += w * (uv[i, 1] - vv)
    img = np.empty((H, W))
    for v in range(H):
        for u in range(W):
            img[v, u] = acc[v, u] / wsum[v, u] if wsum[v, u] > 0 else sky
    return img, wsum, off
