"""Compiled kernels for SDF tracing, path-traced radiance, and baking.

Everything here is scalar numba code wrapped by prange batch drivers.
Outputs are written per item (pixel, point) with no cross-item
reductions, and every random draw is a pure function of
(seed, stream, index), so results are independent of thread count and
scheduling.

Sample-index layout inside one radiance query (PATH_STRIDE dims per
path): each bounce consumes 5 dims (emitter pick, 2 emitter dims,
2 continuation dims).  Camera paths prepend 2 jitter dims.
"""

from __future__ import annotations

import math
import os
from collections import namedtuple

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")  # quiet TBB probe

import numpy as np
from numba import njit, prange

# primitive type codes
SPHERE, BOX, PLANE, ROUNDED_BOX = 0, 1, 2, 3
# csg opcodes
OP_PRIM, OP_UNION, OP_SUBTRACT, OP_INTERSECT = 0, 1, 2, 3

MAX_STEPS = 256
MAX_STACK = 16
BOUNCE_DIMS = 5
JITTER_DIMS = 2

_PHI = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / 9007199254740992.0

ScenePack = namedtuple(
    "ScenePack",
    [
        "prim_type",      # int32 (P,)
        "prim_rot",       # float64 (P,3,3) world-to-local rotation
        "prim_pos",       # float64 (P,3)
        "prim_scale",     # float64 (P,)
        "prim_params",    # float64 (P,4)
        "prim_instance",  # int32 (P,)
        "prim_material",  # int32 (P,)
        "prim_emission",  # float64 (P,3)
        "prim_emissive",  # uint8 (P,)
        "csg_op",         # int32 (C,)
        "csg_arg",        # int32 (C,)
        "mat_albedo",     # float64 (M,3)
        "mat_rough",      # float64 (M,)
        "mat_specular",   # uint8 (M,)
        "emitters",       # int32 (E,)
        "bbox_lo",        # float64 (3,)
        "bbox_hi",        # float64 (3,)
        "ambient",        # float64 (3,)
        "eps",            # float64
        "scale",          # float64
    ],
)

# material source for the radiance estimator: either the scene's own
# materials or albedo/roughness grids (used when re-rendering a scene
# lit through fitted materials).  gt_prims marks primitives that keep
# their declared materials even in grid mode (inserted objects).
MatPack = namedtuple(
    "MatPack",
    ["from_grids", "gt_prims", "albedo", "rough", "lo", "hi"],
)


def gt_matpack(n_prims: int) -> MatPack:
    return MatPack(
        False,
        np.zeros(n_prims, dtype=np.uint8),
        np.zeros((2, 2, 2, 3), dtype=np.float64),
        np.zeros((2, 2, 2, 1), dtype=np.float64),
        np.zeros(3),
        np.ones(3),
    )


def grid_matpack(albedo_values, rough_values, lo, hi, gt_prims) -> MatPack:
    return MatPack(
        True,
        np.ascontiguousarray(gt_prims, dtype=np.uint8),
        np.ascontiguousarray(albedo_values, dtype=np.float64),
        np.ascontiguousarray(rough_values, dtype=np.float64),
        np.asarray(lo, dtype=np.float64),
        np.asarray(hi, dtype=np.float64),
    )


# ---------------------------------------------------------------- RNG


@njit(cache=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _rng(seed, stream, idx):
    h = _mix64(seed + _PHI)
    h = _mix64(h ^ stream)
    h = _mix64(h ^ idx)
    return np.float64(h >> np.uint64(11)) * _INV_2_53


# ------------------------------------------------------------- frames


@njit(cache=True)
def _onb(nx, ny, nz):
    # Duff et al. branchless basis; must mirror core.build_onb exactly
    s = math.copysign(1.0, nz)
    a = -1.0 / (s + nz)
    b = nx * ny * a
    return (1.0 + s * nx * nx * a, s * b, -s * nx), (b, s + ny * ny * a, -ny)


@njit(cache=True)
def _uniform_hemi(nx, ny, nz, u1, u2):
    cos_t = u1 if u1 < 1.0 else 1.0
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * math.pi * u2
    t, bt = _onb(nx, ny, nz)
    lx, ly = sin_t * math.cos(phi), sin_t * math.sin(phi)
    return (
        lx * t[0] + ly * bt[0] + cos_t * nx,
        lx * t[1] + ly * bt[1] + cos_t * ny,
        lx * t[2] + ly * bt[2] + cos_t * nz,
    )


@njit(cache=True)
def _cosine_hemi(nx, ny, nz, u1, u2):
    # concentric disk, then lift; returns (dir, cos_theta)
    a = 2.0 * u1 - 1.0
    b = 2.0 * u2 - 1.0
    if a == 0.0 and b == 0.0:
        r, phi = 0.0, 0.0
    elif abs(a) > abs(b):
        r, phi = a, (math.pi / 4.0) * (b / a)
    else:
        r, phi = b, (math.pi / 2.0) - (math.pi / 4.0) * (a / b)
    dx, dy = r * math.cos(phi), r * math.sin(phi)
    z = math.sqrt(max(0.0, 1.0 - dx * dx - dy * dy))
    t, bt = _onb(nx, ny, nz)
    return (
        dx * t[0] + dy * bt[0] + z * nx,
        dx * t[1] + dy * bt[1] + z * ny,
        dx * t[2] + dy * bt[2] + z * nz,
    ), z


# ------------------------------------------------------ SDF primitives
#
# Functions below this point take the pack's member arrays rather than
# the pack itself.  Passing the namedtuple through a per-step call makes
# numba refcount every member at the boundary, which costs two orders of
# magnitude more than the distance math; drivers unpack once instead.
# The member order is fixed everywhere: ptype, pparams, ppos, prot,
# pscale, pinst, csg_op, csg_arg.


@njit(cache=True)
def _prim_normal(ptyp, pparams, ppos, prot, pscale, i, x, y, z):
    """Outward unit normal of primitive i near its surface, world space."""
    ptype = ptyp[i]
    if ptype == PLANE:
        return pparams[i, 0], pparams[i, 1], pparams[i, 2]
    px = x - ppos[i, 0]
    py = y - ppos[i, 1]
    pz = z - ppos[i, 2]
    r = prot[i]
    s = pscale[i]
    lx = (r[0, 0] * px + r[0, 1] * py + r[0, 2] * pz) / s
    ly = (r[1, 0] * px + r[1, 1] * py + r[1, 2] * pz) / s
    lz = (r[2, 0] * px + r[2, 1] * py + r[2, 2] * pz) / s
    if ptype == SPHERE:
        nl = math.sqrt(lx * lx + ly * ly + lz * lz)
        if nl < 1e-20:
            nx, ny, nz = 0.0, 0.0, 1.0
        else:
            nx, ny, nz = lx / nl, ly / nl, lz / nl
    else:
        qx = abs(lx) - pparams[i, 0]
        qy = abs(ly) - pparams[i, 1]
        qz = abs(lz) - pparams[i, 2]
        if qx > 0.0 or qy > 0.0 or qz > 0.0:
            nx = max(qx, 0.0) * (1.0 if lx >= 0.0 else -1.0)
            ny = max(qy, 0.0) * (1.0 if ly >= 0.0 else -1.0)
            nz = max(qz, 0.0) * (1.0 if lz >= 0.0 else -1.0)
        else:
            # interior: face of the largest (least negative) component
            nx, ny, nz = 0.0, 0.0, 0.0
            if qx >= qy and qx >= qz:
                nx = 1.0 if lx >= 0.0 else -1.0
            elif qy >= qz:
                ny = 1.0 if ly >= 0.0 else -1.0
            else:
                nz = 1.0 if lz >= 0.0 else -1.0
        nl = math.sqrt(nx * nx + ny * ny + nz * nz)
        if nl < 1e-20:
            nx, ny, nz = 0.0, 0.0, 1.0
        else:
            nx, ny, nz = nx / nl, ny / nl, nz / nl
    # rotate local normal back to world: rows of the world-to-local
    # matrix are the local axes, so world = R^T local
    wx = r[0, 0] * nx + r[1, 0] * ny + r[2, 0] * nz
    wy = r[0, 1] * nx + r[1, 1] * ny + r[2, 1] * nz
    wz = r[0, 2] * nx + r[1, 2] * ny + r[2, 2] * nz
    return wx, wy, wz


@njit(cache=True)
def _sdf(ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, x, y, z, scr):
    """CSG-combined signed distance; returns (d, contributing prim, sign).

    sign is -1 when the contributing surface comes from a subtracted
    primitive, whose outward normal points into that primitive.  scr is
    (MAX_STACK, 3) float64 scratch owned by the caller; reusing it
    keeps this allocation-free, which dominates trace throughput.
    Columns hold (distance, prim index, sign).
    """
    top = -1
    for c in range(csg_op.shape[0]):
        op = csg_op[c]
        if op == OP_PRIM:
            i = csg_arg[c]
            ptype = ptyp[i]
            if ptype == PLANE:
                # world-space half space: params hold (normal, offset)
                d = (
                    pparams[i, 0] * x
                    + pparams[i, 1] * y
                    + pparams[i, 2] * z
                    - pparams[i, 3]
                )
            else:
                px = x - ppos[i, 0]
                py = y - ppos[i, 1]
                pz = z - ppos[i, 2]
                r = prot[i]
                s = pscale[i]
                lx = (r[0, 0] * px + r[0, 1] * py + r[0, 2] * pz) / s
                ly = (r[1, 0] * px + r[1, 1] * py + r[1, 2] * pz) / s
                lz = (r[2, 0] * px + r[2, 1] * py + r[2, 2] * pz) / s
                if ptype == SPHERE:
                    d = math.sqrt(lx * lx + ly * ly + lz * lz) - pparams[i, 0]
                else:
                    # box family
                    qx = abs(lx) - pparams[i, 0]
                    qy = abs(ly) - pparams[i, 1]
                    qz = abs(lz) - pparams[i, 2]
                    bx = max(qx, 0.0)
                    by = max(qy, 0.0)
                    bz = max(qz, 0.0)
                    d = math.sqrt(bx * bx + by * by + bz * bz) + min(
                        max(qx, max(qy, qz)), 0.0
                    )
                    if ptype == ROUNDED_BOX:
                        d -= pparams[i, 3]
                d = d * s
            top += 1
            scr[top, 0] = d
            scr[top, 1] = i
            scr[top, 2] = 1.0
        elif op == OP_UNION:
            db, pb, sb = scr[top, 0], np.int32(scr[top, 1]), scr[top, 2]
            top -= 1
            da, pa = scr[top, 0], np.int32(scr[top, 1])
            take_b = db < da or (db == da and pinst[pb] < pinst[pa])
            if take_b:
                scr[top, 0] = db
                scr[top, 1] = pb
                scr[top, 2] = sb
        elif op == OP_SUBTRACT:
            db, pb, sb = scr[top, 0], np.int32(scr[top, 1]), scr[top, 2]
            top -= 1
            da = scr[top, 0]
            if -db > da:
                scr[top, 0] = -db
                scr[top, 1] = pb
                scr[top, 2] = -sb
        else:  # OP_INTERSECT
            db, pb, sb = scr[top, 0], np.int32(scr[top, 1]), scr[top, 2]
            top -= 1
            da = scr[top, 0]
            if db > da or (
                db == da and pinst[pb] < pinst[np.int32(scr[top, 1])]
            ):
                scr[top, 0] = db
                scr[top, 1] = pb
                scr[top, 2] = sb
    return scr[0, 0], np.int32(scr[0, 1]), scr[0, 2]


@njit(cache=True)
def _sdf_normal_central(
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, x, y, z, h, scr
):
    d0, _, _ = _sdf(
        ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, x + h, y, z, scr
    )
    d1, _, _ = _sdf(
        ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, x - h, y, z, scr
    )
    d2, _, _ = _sdf(
        ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, x, y + h, z, scr
    )
    d3, _, _ = _sdf(
        ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, x, y - h, z, scr
    )
    d4, _, _ = _sdf(
        ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, x, y, z + h, scr
    )
    d5, _, _ = _sdf(
        ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, x, y, z - h, scr
    )
    gx, gy, gz = d0 - d1, d2 - d3, d4 - d5
    norm = math.sqrt(gx * gx + gy * gy + gz * gz)
    if norm < 1e-30:
        return 0.0, 0.0, 0.0, 0.0
    return gx / norm, gy / norm, gz / norm, norm / (2.0 * h)


@njit(cache=True)
def _trace(
    ptyp,
    pparams,
    ppos,
    prot,
    pscale,
    pinst,
    csg_op,
    csg_arg,
    eps,
    ox,
    oy,
    oz,
    dx,
    dy,
    dz,
    t_max,
    scr,
):
    """Sphere trace; returns (t, prim, csg_sign, budget_exhausted).

    prim < 0 marks a miss.  Steps by |d| so rays starting inside a
    solid still converge to the first surface crossing.
    """
    t = 0.0
    for _ in range(MAX_STEPS):
        d, p, sgn = _sdf(
            ptyp,
            pparams,
            ppos,
            prot,
            pscale,
            pinst,
            csg_op,
            csg_arg,
            ox + t * dx,
            oy + t * dy,
            oz + t * dz,
            scr,
        )
        ad = abs(d)
        if ad < eps:
            return t, p, sgn, False
        t += ad
        if t > t_max:
            return t, np.int32(-1), 1.0, False
    return t, np.int32(-1), 1.0, True


@njit(cache=True)
def _hit_normal(ptyp, pparams, ppos, prot, pscale, prim, sgn, x, y, z, dx, dy, dz):
    """Front-facing surface normal at a trace hit."""
    nx, ny, nz = _prim_normal(ptyp, pparams, ppos, prot, pscale, prim, x, y, z)
    nx, ny, nz = nx * sgn, ny * sgn, nz * sgn
    if nx * dx + ny * dy + nz * dz > 0.0:
        return -nx, -ny, -nz
    return nx, ny, nz


# ------------------------------------------------------------ BRDF


@njit(cache=True)
def _ggx_d(c, rough):
    a = rough * rough
    t = c * c * (a * a - 1.0) + 1.0
    return a * a / (math.pi * t * t)


@njit(cache=True)
def _fresnel(oh):
    m = 1.0 - oh
    return 0.04 + 0.96 * m * m * m * m * m


@njit(cache=True)
def _g1(c, k):
    return c / (c * (1.0 - k) + k)


@njit(cache=True)
def _spec_eval(n_i, n_o, n_h, o_h, rough):
    if n_i <= 0.0 or n_o <= 0.0:
        return 0.0
    a = rough * rough
    k = a * a / 2.0
    d = _ggx_d(n_h, rough)
    f = _fresnel(o_h)
    g = _g1(max(n_o, 1e-12), k) * _g1(max(n_i, 1e-12), k)
    return d * f * g / max(4.0 * n_o * n_i, 1e-4)


@njit(cache=True)
def _spec_eval_vec(nx, ny, nz, ix, iy, iz, ox, oy, oz, rough):
    sx, sy, sz = ix + ox, iy + oy, iz + oz
    sl = math.sqrt(sx * sx + sy * sy + sz * sz)
    if sl < 1e-12:
        return 0.0
    hx, hy, hz = sx / sl, sy / sl, sz / sl
    n_h = min(max(nx * hx + ny * hy + nz * hz, 0.0), 1.0)
    o_h = min(max(0.5 * sl, 0.0), 1.0)
    n_i = nx * ix + ny * iy + nz * iz
    n_o = nx * ox + ny * oy + nz * oz
    return _spec_eval(n_i, n_o, n_h, o_h, rough)


# ------------------------------------------------- material lookup


@njit(cache=True)
def _grid_fetch3(values, lo, hi, x, y, z):
    """Trilinear lookup of up to 3 channels at a world position."""
    nx, ny, nz = values.shape[0], values.shape[1], values.shape[2]
    ux = (x - lo[0]) / (hi[0] - lo[0]) * (nx - 1.0)
    uy = (y - lo[1]) / (hi[1] - lo[1]) * (ny - 1.0)
    uz = (z - lo[2]) / (hi[2] - lo[2]) * (nz - 1.0)
    ux = min(max(ux, 0.0), nx - 1.0)
    uy = min(max(uy, 0.0), ny - 1.0)
    uz = min(max(uz, 0.0), nz - 1.0)
    i0 = min(int(ux), nx - 2)
    j0 = min(int(uy), ny - 2)
    k0 = min(int(uz), nz - 2)
    fx, fy, fz = ux - i0, uy - j0, uz - k0
    out0 = out1 = out2 = 0.0
    nc = values.shape[3]
    for di in range(2):
        wi_ = fx if di == 1 else 1.0 - fx
        for dj in range(2):
            wj = fy if dj == 1 else 1.0 - fy
            for dk in range(2):
                wk = fz if dk == 1 else 1.0 - fz
                w = wi_ * wj * wk
                out0 += w * values[i0 + di, j0 + dj, k0 + dk, 0]
                if nc > 1:
                    out1 += w * values[i0 + di, j0 + dj, k0 + dk, 1]
                if nc > 2:
                    out2 += w * values[i0 + di, j0 + dj, k0 + dk, 2]
    return out0, out1, out2


@njit(cache=True)
def _surface_material(
    pmat, malb, mrgh, mspc, mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi, prim, x, y, z
):
    """(albedo rgb, roughness, specular?) at a hit, from scene or grids."""
    if mg_on and mg_keep[prim] == 0:
        a0, a1, a2 = _grid_fetch3(mg_alb, mg_lo, mg_hi, x, y, z)
        r0, _, _ = _grid_fetch3(mg_rgh, mg_lo, mg_hi, x, y, z)
        a0 = min(max(a0, 0.0), 1.0)
        a1 = min(max(a1, 0.0), 1.0)
        a2 = min(max(a2, 0.0), 1.0)
        return a0, a1, a2, min(max(r0, 0.01), 1.0), True
    m = pmat[prim]
    return malb[m, 0], malb[m, 1], malb[m, 2], mrgh[m], mspc[m] != 0


# ------------------------------------------------- emitter sampling


@njit(cache=True)
def _sample_emitter(ptyp, pparams, ppos, prot, pscale, e_prim, x, y, z, nx, ny, nz, u1, u2):
    """Direction toward emitter primitive and its solid-angle pdf.

    Returns (dir, pdf, t_expect); t_expect < 0 means any hit on the
    emitter primitive counts (cone/hemisphere sampling), otherwise the
    first hit must land at that distance to be unoccluded.
    """
    ptype = ptyp[e_prim]
    if ptype == SPHERE:
        cx = ppos[e_prim, 0]
        cy = ppos[e_prim, 1]
        cz = ppos[e_prim, 2]
        rad = pparams[e_prim, 0] * pscale[e_prim]
        vx, vy, vz = cx - x, cy - y, cz - z
        d2 = vx * vx + vy * vy + vz * vz
        if d2 <= rad * rad * 1.0001:
            # inside the emitter: it fills the hemisphere
            dx, dy, dz = _uniform_hemi(nx, ny, nz, u1, u2)
            return dx, dy, dz, 1.0 / (2.0 * math.pi), -1.0
        dist = math.sqrt(d2)
        cos_max = math.sqrt(max(0.0, 1.0 - (rad * rad) / d2))
        cos_t = 1.0 - u1 * (1.0 - cos_max)
        sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
        phi = 2.0 * math.pi * u2
        ax, ay, az = vx / dist, vy / dist, vz / dist
        t, bt = _onb(ax, ay, az)
        lx, ly = sin_t * math.cos(phi), sin_t * math.sin(phi)
        dx = lx * t[0] + ly * bt[0] + cos_t * ax
        dy = lx * t[1] + ly * bt[1] + cos_t * ay
        dz = lx * t[2] + ly * bt[2] + cos_t * az
        pdf = 1.0 / (2.0 * math.pi * max(1.0 - cos_max, 1e-12))
        return dx, dy, dz, pdf, -1.0
    if ptype == BOX or ptype == ROUNDED_BOX:
        # uniform point on the box surface, converted to solid angle
        s = pscale[e_prim]
        hx = pparams[e_prim, 0] * s
        hy = pparams[e_prim, 1] * s
        hz = pparams[e_prim, 2] * s
        # full face areas: an x-face spans 2hy by 2hz
        ax_, ay_, az_ = 4.0 * hy * hz, 4.0 * hx * hz, 4.0 * hx * hy
        total = 2.0 * (ax_ + ay_ + az_)
        pick = u1 * total
        # reuse u1 within the chosen face, keep u2 for the second axis
        if pick < 2.0 * ax_:
            face, side = 0, 1.0 if pick < ax_ else -1.0
            fu = (pick / ax_) % 1.0
            lx, ly, lz = side * hx, (2.0 * fu - 1.0) * hy, (2.0 * u2 - 1.0) * hz
            fnx, fny, fnz = side, 0.0, 0.0
        elif pick < 2.0 * (ax_ + ay_):
            q = pick - 2.0 * ax_
            face, side = 1, 1.0 if q < ay_ else -1.0
            fu = (q / ay_) % 1.0
            lx, ly, lz = (2.0 * fu - 1.0) * hx, side * hy, (2.0 * u2 - 1.0) * hz
            fnx, fny, fnz = 0.0, side, 0.0
        else:
            q = pick - 2.0 * (ax_ + ay_)
            side = 1.0 if q < az_ else -1.0
            fu = (q / az_) % 1.0
            lx, ly, lz = (2.0 * fu - 1.0) * hx, (2.0 * u2 - 1.0) * hy, side * hz
            fnx, fny, fnz = 0.0, 0.0, side
        r = prot[e_prim]
        px = r[0, 0] * lx + r[1, 0] * ly + r[2, 0] * lz + ppos[e_prim, 0]
        py = r[0, 1] * lx + r[1, 1] * ly + r[2, 1] * lz + ppos[e_prim, 1]
        pz = r[0, 2] * lx + r[1, 2] * ly + r[2, 2] * lz + ppos[e_prim, 2]
        wnx = r[0, 0] * fnx + r[1, 0] * fny + r[2, 0] * fnz
        wny = r[0, 1] * fnx + r[1, 1] * fny + r[2, 1] * fnz
        wnz = r[0, 2] * fnx + r[1, 2] * fny + r[2, 2] * fnz
        vx, vy, vz = px - x, py - y, pz - z
        dist = math.sqrt(vx * vx + vy * vy + vz * vz)
        if dist < 1e-9:
            return 0.0, 0.0, 1.0, 0.0, -1.0
        dx, dy, dz = vx / dist, vy / dist, vz / dist
        cos_l = -(wnx * dx + wny * dy + wnz * dz)
        if cos_l <= 1e-9:
            return dx, dy, dz, 0.0, -1.0
        pdf = dist * dist / (total * cos_l)
        return dx, dy, dz, pdf, dist
    # planes cannot emit
    return 0.0, 0.0, 1.0, 0.0, -1.0


# ------------------------------------------------- radiance estimator


@njit(cache=True)
def _radiance(
    ptyp,
    pparams,
    ppos,
    prot,
    pscale,
    pinst,
    csg_op,
    csg_arg,
    eps,
    scale,
    ambient,
    emitters,
    pemit,
    pems,
    pmat,
    malb,
    mrgh,
    mspc,
    mg_on,
    mg_keep,
    mg_alb,
    mg_rgh,
    mg_lo,
    mg_hi,
    ox,
    oy,
    oz,
    dx,
    dy,
    dz,
    seed,
    stream,
    idx0,
    max_bounces,
    scr,
):
    """One path-traced sample of radiance arriving at the ray origin.

    Emission is collected at the primary hit only; at every subsequent
    vertex direct light comes from next-event estimation, so emitter
    hits along continuation rays terminate the path uncollected.
    Ambient background radiance enters when a ray escapes the scene.
    Returns (r, g, b, first_hit_prim); prim < 0 on a primary miss.
    """
    t_far = 4.0 * scale
    out0 = out1 = out2 = 0.0
    th0 = th1 = th2 = 1.0
    n_emit = emitters.shape[0]
    t, prim, sgn, _ = _trace(
        ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, eps,
        ox, oy, oz, dx, dy, dz, t_far, scr,
    )
    first = prim
    if prim < 0:
        return ambient[0], ambient[1], ambient[2], first
    if pemit[prim] != 0:
        return pems[prim, 0], pems[prim, 1], pems[prim, 2], first
    x, y, z = ox + t * dx, oy + t * dy, oz + t * dz
    wox, woy, woz = -dx, -dy, -dz
    has_ambient = ambient[0] > 0.0 or ambient[1] > 0.0 or ambient[2] > 0.0
    for b in range(max_bounces):
        nx, ny, nz = _hit_normal(
            ptyp, pparams, ppos, prot, pscale, prim, sgn, x, y, z, -wox, -woy, -woz
        )
        a0, a1, a2, rough, spec_on = _surface_material(
            pmat, malb, mrgh, mspc, mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi,
            prim, x, y, z,
        )
        base = idx0 + np.uint64(b * BOUNCE_DIMS)
        # next-event estimation toward one emitter
        if n_emit > 0:
            upick = _rng(seed, stream, base)
            u1 = _rng(seed, stream, base + np.uint64(1))
            u2 = _rng(seed, stream, base + np.uint64(2))
            ei = min(int(upick * n_emit), n_emit - 1)
            e_prim = emitters[ei]
            ldx, ldy, ldz, pdf, t_expect = _sample_emitter(
                ptyp, pparams, ppos, prot, pscale, e_prim, x, y, z, nx, ny, nz, u1, u2
            )
            cos_i = ldx * nx + ldy * ny + ldz * nz
            if pdf > 1e-12 and cos_i > 1e-9:
                off = 2.0 * eps
                ts, ps, _, _ = _trace(
                    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, eps,
                    x + nx * off, y + ny * off, z + nz * off,
                    ldx, ldy, ldz, t_far, scr,
                )
                visible = ps == e_prim
                if visible and t_expect > 0.0:
                    # area-sampled point must be the one actually reached
                    visible = abs(ts - t_expect) < 20.0 * eps
                if visible:
                    fs = 0.0
                    if spec_on:
                        fs = _spec_eval_vec(
                            nx, ny, nz, ldx, ldy, ldz, wox, woy, woz, rough
                        )
                    w = cos_i * n_emit / pdf
                    out0 += th0 * (a0 / math.pi + fs) * pems[e_prim, 0] * w
                    out1 += th1 * (a1 / math.pi + fs) * pems[e_prim, 1] * w
                    out2 += th2 * (a2 / math.pi + fs) * pems[e_prim, 2] * w
        # cosine-sampled continuation; throughput *= brdf * pi
        last = b == max_bounces - 1
        if last and not has_ambient:
            break
        u3 = _rng(seed, stream, base + np.uint64(3))
        u4 = _rng(seed, stream, base + np.uint64(4))
        (cdx, cdy, cdz), _ = _cosine_hemi(nx, ny, nz, u3, u4)
        fs = 0.0
        if spec_on:
            fs = _spec_eval_vec(nx, ny, nz, cdx, cdy, cdz, wox, woy, woz, rough)
        th0 *= a0 + math.pi * fs
        th1 *= a1 + math.pi * fs
        th2 *= a2 + math.pi * fs
        off = 2.0 * eps
        t, prim, sgn, _ = _trace(
            ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, eps,
            x + nx * off, y + ny * off, z + nz * off, cdx, cdy, cdz, t_far, scr,
        )
        if prim < 0:
            out0 += th0 * ambient[0]
            out1 += th1 * ambient[1]
            out2 += th2 * ambient[2]
            break
        if pemit[prim] != 0 or last:
            break
        x, y, z = x + nx * off + t * cdx, y + ny * off + t * cdy, z + nz * off + t * cdz
        wox, woy, woz = -cdx, -cdy, -cdz
    return out0, out1, out2, first


def path_stride(max_bounces: int) -> int:
    return BOUNCE_DIMS * max_bounces


# ---------------------------------------------------- batch wrappers
#
# Drivers keep pack/matpack signatures for the python modules but
# unpack both once, outside prange, into the plain arrays the private
# functions take.  The scratch stack is allocated once per work item.


@njit(cache=True)
def _geo(pack):
    """Geometry members in the shared parameter order."""
    return (
        pack.prim_type, pack.prim_params, pack.prim_pos, pack.prim_rot,
        pack.prim_scale, pack.prim_instance, pack.csg_op, pack.csg_arg,
    )


@njit(cache=True)
def _lights_mats(pack, mats):
    """Emitter and material members in the order _radiance takes them."""
    return (
        pack.ambient, pack.emitters, pack.prim_emissive, pack.prim_emission,
        pack.prim_material, pack.mat_albedo, pack.mat_rough, pack.mat_specular,
        mats.from_grids, mats.gt_prims, mats.albedo, mats.rough,
        mats.lo, mats.hi,
    )


@njit(cache=True, parallel=True)
def sdf_eval_batch(pack, pts):
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg = _geo(pack)
    n = pts.shape[0]
    d = np.empty(n, dtype=np.float64)
    inst = np.empty(n, dtype=np.int32)
    for i in prange(n):
        scr = np.empty((MAX_STACK, 3), dtype=np.float64)
        di, pi, _ = _sdf(
            ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg,
            pts[i, 0], pts[i, 1], pts[i, 2], scr,
        )
        d[i] = di
        inst[i] = pinst[pi]
    return d, inst


@njit(cache=True, parallel=True)
def sdf_normal_batch(pack, pts, h):
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg = _geo(pack)
    n = pts.shape[0]
    out = np.empty((n, 3), dtype=np.float64)
    mag = np.empty(n, dtype=np.float64)
    for i in prange(n):
        scr = np.empty((MAX_STACK, 3), dtype=np.float64)
        gx, gy, gz, m = _sdf_normal_central(
            ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg,
            pts[i, 0], pts[i, 1], pts[i, 2], h, scr,
        )
        out[i, 0], out[i, 1], out[i, 2] = gx, gy, gz
        mag[i] = m
    return out, mag


@njit(cache=True, parallel=True)
def trace_batch(pack, origins, dirs, t_max):
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg = _geo(pack)
    eps = pack.eps
    n = origins.shape[0]
    ts = np.empty(n, dtype=np.float64)
    prim = np.empty(n, dtype=np.int32)
    sgn = np.empty(n, dtype=np.float64)
    exhausted = np.zeros(n, dtype=np.uint8)
    for i in prange(n):
        scr = np.empty((MAX_STACK, 3), dtype=np.float64)
        t, p, s, ex = _trace(
            ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, eps,
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2],
            t_max, scr,
        )
        ts[i] = t
        prim[i] = p
        sgn[i] = s
        exhausted[i] = np.uint8(1) if ex else np.uint8(0)
    return ts, prim, sgn, exhausted


@njit(cache=True, parallel=True)
def hit_normal_batch(pack, prims, sgns, pts, dirs):
    ptyp, pparams, ppos, prot, pscale, _, _, _ = _geo(pack)
    n = pts.shape[0]
    out = np.empty((n, 3), dtype=np.float64)
    for i in prange(n):
        nx, ny, nz = _hit_normal(
            ptyp, pparams, ppos, prot, pscale, prims[i], sgns[i],
            pts[i, 0], pts[i, 1], pts[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2],
        )
        out[i, 0], out[i, 1], out[i, 2] = nx, ny, nz
    return out


@njit(cache=True, parallel=True)
def radiance_batch(pack, mats, origins, dirs, seed, streams, idx0s, max_bounces):
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg = _geo(pack)
    (ambient, emitters, pemit, pems, pmat, malb, mrgh, mspc,
     mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi) = _lights_mats(pack, mats)
    eps = pack.eps
    scale = pack.scale
    n = origins.shape[0]
    out = np.empty((n, 3), dtype=np.float64)
    s64 = np.uint64(seed)
    for i in prange(n):
        scr = np.empty((MAX_STACK, 3), dtype=np.float64)
        r, g, b, _ = _radiance(
            ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, eps, scale,
            ambient, emitters, pemit, pems, pmat, malb, mrgh, mspc,
            mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi,
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2],
            s64, streams[i], idx0s[i], max_bounces, scr,
        )
        out[i, 0], out[i, 1], out[i, 2] = r, g, b
    return out


@njit(cache=True, parallel=True)
def render_image(pack, mats, cam_rot, cam_pos, fx, fy, cx, cy, width, height,
                 spp, max_bounces, seed, stream_base):
    """Path-traced HDR image; per-pixel streams, spp samples averaged."""
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg = _geo(pack)
    (ambient, emitters, pemit, pems, pmat, malb, mrgh, mspc,
     mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi) = _lights_mats(pack, mats)
    eps = pack.eps
    scale = pack.scale
    img = np.zeros((height, width, 3), dtype=np.float64)
    stride = np.uint64(JITTER_DIMS + BOUNCE_DIMS * max_bounces)
    s64 = np.uint64(seed)
    npix = width * height
    for pix in prange(npix):
        scr = np.empty((MAX_STACK, 3), dtype=np.float64)
        py = pix // width
        px = pix - py * width
        stream = np.uint64(stream_base) + np.uint64(pix)
        acc0 = acc1 = acc2 = 0.0
        for s in range(spp):
            base = np.uint64(s) * stride
            jx = _rng(s64, stream, base)
            jy = _rng(s64, stream, base + np.uint64(1))
            u = (px + jx - cx) / fx
            v = (py + jy - cy) / fy
            dx = cam_rot[0, 0] * u + cam_rot[0, 1] * v + cam_rot[0, 2]
            dy = cam_rot[1, 0] * u + cam_rot[1, 1] * v + cam_rot[1, 2]
            dz = cam_rot[2, 0] * u + cam_rot[2, 1] * v + cam_rot[2, 2]
            dl = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx, dy, dz = dx / dl, dy / dl, dz / dl
            r, g, b, _ = _radiance(
                ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg,
                eps, scale,
                ambient, emitters, pemit, pems, pmat, malb, mrgh, mspc,
                mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi,
                cam_pos[0], cam_pos[1], cam_pos[2],
                dx, dy, dz, s64, stream, base + np.uint64(JITTER_DIMS),
                max_bounces, scr,
            )
            acc0 += r
            acc1 += g
            acc2 += b
        img[py, px, 0] = acc0 / spp
        img[py, px, 1] = acc1 / spp
        img[py, px, 2] = acc2 / spp
    return img


@njit(cache=True, parallel=True)
def primary_hits(pack, cam_rot, cam_pos, fx, fy, cx, cy, width, height):
    """Center-ray first hits per pixel: t, prim, instance, point, normal."""
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg = _geo(pack)
    eps = pack.eps
    npix = width * height
    ts = np.empty(npix, dtype=np.float64)
    prim = np.empty(npix, dtype=np.int32)
    inst = np.empty(npix, dtype=np.int32)
    pts = np.empty((npix, 3), dtype=np.float64)
    nrm = np.empty((npix, 3), dtype=np.float64)
    t_far = 4.0 * pack.scale
    for pix in prange(npix):
        scr = np.empty((MAX_STACK, 3), dtype=np.float64)
        py = pix // width
        px = pix - py * width
        u = (px + 0.5 - cx) / fx
        v = (py + 0.5 - cy) / fy
        dx = cam_rot[0, 0] * u + cam_rot[0, 1] * v + cam_rot[0, 2]
        dy = cam_rot[1, 0] * u + cam_rot[1, 1] * v + cam_rot[1, 2]
        dz = cam_rot[2, 0] * u + cam_rot[2, 1] * v + cam_rot[2, 2]
        dl = math.sqrt(dx * dx + dy * dy + dz * dz)
        dx, dy, dz = dx / dl, dy / dl, dz / dl
        t, p, sgn, _ = _trace(
            ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, eps,
            cam_pos[0], cam_pos[1], cam_pos[2], dx, dy, dz, t_far, scr,
        )
        ts[pix] = t
        prim[pix] = p
        if p >= 0:
            x, y, z = cam_pos[0] + t * dx, cam_pos[1] + t * dy, cam_pos[2] + t * dz
            pts[pix, 0], pts[pix, 1], pts[pix, 2] = x, y, z
            nx, ny, nz = _hit_normal(
                ptyp, pparams, ppos, prot, pscale, p, sgn, x, y, z, dx, dy, dz
            )
            nrm[pix, 0], nrm[pix, 1], nrm[pix, 2] = nx, ny, nz
            inst[pix] = pinst[p]
        else:
            pts[pix, 0], pts[pix, 1], pts[pix, 2] = 0.0, 0.0, 0.0
            nrm[pix, 0], nrm[pix, 1], nrm[pix, 2] = 0.0, 0.0, 0.0
            inst[pix] = -1
    return ts, prim, inst, pts, nrm


@njit(cache=True, parallel=True)
def irradiance_points(pack, mats, pts, nrms, n_samples, max_bounces, seed, entity0):
    """Cosine-weighted irradiance estimates, (pi/N) sums of radiance.

    Returns (total, direct) where direct keeps only samples whose
    primary hit was an emitter; total - direct is the indirect part
    (shared directions, so the split is exact per sample).
    """
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg = _geo(pack)
    (ambient, emitters, pemit, pems, pmat, malb, mrgh, mspc,
     mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi) = _lights_mats(pack, mats)
    eps = pack.eps
    scale = pack.scale
    n = pts.shape[0]
    out = np.empty((n, 3), dtype=np.float64)
    out_direct = np.empty((n, 3), dtype=np.float64)
    s64 = np.uint64(seed)
    qstride = np.uint64(2 + BOUNCE_DIMS * max_bounces)
    purpose = np.uint64(1) << np.uint64(56)
    for i in prange(n):
        scr = np.empty((MAX_STACK, 3), dtype=np.float64)
        stream = purpose + np.uint64(entity0 + i)
        x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
        nx, ny, nz = nrms[i, 0], nrms[i, 1], nrms[i, 2]
        off = 2.0 * eps
        ox, oy, oz = x + nx * off, y + ny * off, z + nz * off
        a0 = a1 = a2 = 0.0
        d0 = d1 = d2 = 0.0
        for j in range(n_samples):
            base = np.uint64(j) * qstride
            u1 = _rng(s64, stream, base)
            u2 = _rng(s64, stream, base + np.uint64(1))
            (dx, dy, dz), _ = _cosine_hemi(nx, ny, nz, u1, u2)
            r, g, b, fp = _radiance(
                ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg,
                eps, scale,
                ambient, emitters, pemit, pems, pmat, malb, mrgh, mspc,
                mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi,
                ox, oy, oz, dx, dy, dz,
                s64, stream, base + np.uint64(2), max_bounces, scr,
            )
            a0 += r
            a1 += g
            a2 += b
            if fp >= 0 and pemit[fp] != 0:
                d0 += r
                d1 += g
                d2 += b
        norm = math.pi / n_samples
        out[i, 0], out[i, 1], out[i, 2] = a0 * norm, a1 * norm, a2 * norm
        out_direct[i, 0] = d0 * norm
        out_direct[i, 1] = d1 * norm
        out_direct[i, 2] = d2 * norm
    return out, out_direct


@njit(cache=True, parallel=True)
def unoccluded_direct_points(pack, pts, nrms, n_samples, seed, entity0):
    """Direct emitter irradiance ignoring all occlusion.

    Solid-angle sampling of each emitter with no visibility rays; this
    is the direct term a point would receive with blockers removed.
    """
    ptyp, pparams, ppos, prot, pscale, _, _, _ = _geo(pack)
    pems = pack.prim_emission
    emitters = pack.emitters
    n = pts.shape[0]
    out = np.zeros((n, 3), dtype=np.float64)
    s64 = np.uint64(seed)
    purpose = np.uint64(7) << np.uint64(56)
    n_emit = emitters.shape[0]
    for i in prange(n):
        stream = purpose + np.uint64(entity0 + i)
        x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
        nx, ny, nz = nrms[i, 0], nrms[i, 1], nrms[i, 2]
        for e in range(n_emit):
            e_prim = emitters[e]
            a0 = a1 = a2 = 0.0
            for j in range(n_samples):
                base = np.uint64(2 * (e * n_samples + j))
                u1 = _rng(s64, stream, base)
                u2 = _rng(s64, stream, base + np.uint64(1))
                dx, dy, dz, pdf, _ = _sample_emitter(
                    ptyp, pparams, ppos, prot, pscale,
                    e_prim, x, y, z, nx, ny, nz, u1, u2,
                )
                if pdf <= 1e-12:
                    continue
                cos_i = dx * nx + dy * ny + dz * nz
                if cos_i <= 0.0:
                    continue
                w = cos_i / pdf
                a0 += pems[e_prim, 0] * w
                a1 += pems[e_prim, 1] * w
                a2 += pems[e_prim, 2] * w
            out[i, 0] += a0 / n_samples
            out[i, 1] += a1 / n_samples
            out[i, 2] += a2 / n_samples
    return out


@njit(cache=True, parallel=True)
def classify_points(pack, mats, pts, nrms, n_samples, mu, max_bounces, seed, entity0):
    """Hard-shadow labels: 1 where any uniform-direction incident
    radiance (summed over rgb) reaches mu.  Early exit on success is
    valid because the max only grows."""
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg = _geo(pack)
    (ambient, emitters, pemit, pems, pmat, malb, mrgh, mspc,
     mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi) = _lights_mats(pack, mats)
    eps = pack.eps
    scale = pack.scale
    n = pts.shape[0]
    out = np.zeros(n, dtype=np.uint8)
    s64 = np.uint64(seed)
    qstride = np.uint64(2 + BOUNCE_DIMS * max_bounces)
    purpose = np.uint64(2) << np.uint64(56)
    for i in prange(n):
        scr = np.empty((MAX_STACK, 3), dtype=np.float64)
        stream = purpose + np.uint64(entity0 + i)
        x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
        nx, ny, nz = nrms[i, 0], nrms[i, 1], nrms[i, 2]
        off = 2.0 * eps
        ox, oy, oz = x + nx * off, y + ny * off, z + nz * off
        for j in range(n_samples):
            base = np.uint64(j) * qstride
            u1 = _rng(s64, stream, base)
            u2 = _rng(s64, stream, base + np.uint64(1))
            dx, dy, dz = _uniform_hemi(nx, ny, nz, u1, u2)
            r, g, b, _ = _radiance(
                ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg,
                eps, scale,
                ambient, emitters, pemit, pems, pmat, malb, mrgh, mspc,
                mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi,
                ox, oy, oz, dx, dy, dz,
                s64, stream, base + np.uint64(2), max_bounces, scr,
            )
            if r + g + b >= mu:
                out[i] = 1
                break
    return out


@njit(cache=True, parallel=True)
def capture_env_maps(pack, mats, pts, nrms, theta_res, phi_res, spp,
                     max_bounces, seed, entity0):
    """Hemispherical radiance maps at surface points, locals frames from
    the shared branchless basis.  Texel centers at (i+.5)/res."""
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg = _geo(pack)
    (ambient, emitters, pemit, pems, pmat, malb, mrgh, mspc,
     mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi) = _lights_mats(pack, mats)
    eps = pack.eps
    scale = pack.scale
    n = pts.shape[0]
    out = np.empty((n, theta_res, phi_res, 3), dtype=np.float32)
    s64 = np.uint64(seed)
    qstride = np.uint64(BOUNCE_DIMS * max_bounces)
    purpose = np.uint64(5) << np.uint64(56)
    for i in prange(n):
        scr = np.empty((MAX_STACK, 3), dtype=np.float64)
        stream = purpose + np.uint64(entity0 + i)
        x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
        nx, ny, nz = nrms[i, 0], nrms[i, 1], nrms[i, 2]
        t, bt = _onb(nx, ny, nz)
        off = 2.0 * eps
        ox, oy, oz = x + nx * off, y + ny * off, z + nz * off
        for ti in range(theta_res):
            theta = (ti + 0.5) / theta_res * (math.pi / 2.0)
            ct, st = math.cos(theta), math.sin(theta)
            for pj in range(phi_res):
                phi = (pj + 0.5) / phi_res * (2.0 * math.pi)
                lx, ly = st * math.cos(phi), st * math.sin(phi)
                dx = lx * t[0] + ly * bt[0] + ct * nx
                dy = lx * t[1] + ly * bt[1] + ct * ny
                dz = lx * t[2] + ly * bt[2] + ct * nz
                texel = ti * phi_res + pj
                a0 = a1 = a2 = 0.0
                for s in range(spp):
                    base = np.uint64((texel * spp + s)) * qstride
                    r, g, b, _ = _radiance(
                        ptyp, pparams, ppos, prot, pscale, pinst,
                        csg_op, csg_arg, eps, scale,
                        ambient, emitters, pemit, pems, pmat, malb, mrgh, mspc,
                        mg_on, mg_keep, mg_alb, mg_rgh, mg_lo, mg_hi,
                        ox, oy, oz, dx, dy, dz,
                        s64, stream, base, max_bounces, scr,
                    )
                    a0 += r
                    a1 += g
                    a2 += b
                out[i, ti, pj, 0] = a0 / spp
                out[i, ti, pj, 1] = a1 / spp
                out[i, ti, pj, 2] = a2 / spp
    return out


@njit(cache=True, parallel=True)
def visibility_fraction(pack, pts, nrms, e_prim, n_samples, seed, entity0):
    """Fraction of emitter-directed sample rays whose first hit is the
    emitter primitive (above-horizon directions only)."""
    ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg = _geo(pack)
    eps = pack.eps
    n = pts.shape[0]
    out = np.zeros(n, dtype=np.float64)
    s64 = np.uint64(seed)
    purpose = np.uint64(6) << np.uint64(56)
    t_far = 4.0 * pack.scale
    for i in prange(n):
        scr = np.empty((MAX_STACK, 3), dtype=np.float64)
        stream = purpose + np.uint64(entity0 + i)
        x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
        nx, ny, nz = nrms[i, 0], nrms[i, 1], nrms[i, 2]
        off = 2.0 * eps
        hits = 0
        usable = 0
        for j in range(n_samples):
            u1 = _rng(s64, stream, np.uint64(2 * j))
            u2 = _rng(s64, stream, np.uint64(2 * j + 1))
            dxx, dyy, dzz, pdf, _ = _sample_emitter(
                ptyp, pparams, ppos, prot, pscale,
                e_prim, x, y, z, nx, ny, nz, u1, u2,
            )
            if pdf <= 1e-12:
                continue
            cos_i = dxx * nx + dyy * ny + dzz * nz
            if cos_i <= 1e-9:
                continue
            usable += 1
            _, p, _, _ = _trace(
                ptyp, pparams, ppos, prot, pscale, pinst, csg_op, csg_arg, eps,
                x + nx * off, y + ny * off, z + nz * off,
                dxx, dyy, dzz, t_far, scr,
            )
            if p == e_prim:
                hits += 1
        if usable > 0:
            out[i] = hits / usable
    return out


@njit(cache=True)
def _env_bilinear(env, t, bt, nx, ny, nz, dx, dy, dz):
    """Bilinear hemisphere-map lookup with phi wrap and theta clamp."""
    theta_res, phi_res = env.shape[0], env.shape[1]
    ct = dx * nx + dy * ny + dz * nz
    ct = min(max(ct, 0.0), 1.0)
    theta = math.acos(ct)
    lx = dx * t[0] + dy * t[1] + dz * t[2]
    ly = dx * bt[0] + dy * bt[1] + dz * bt[2]
    phi = math.atan2(ly, lx)
    if phi < 0.0:
        phi += 2.0 * math.pi
    tc = theta / (math.pi / 2.0) * theta_res - 0.5
    tc = min(max(tc, 0.0), theta_res - 1.0)
    pc = phi / (2.0 * math.pi) * phi_res - 0.5
    if pc < 0.0:
        pc += phi_res
    i0 = min(int(tc), theta_res - 1)
    i1 = min(i0 + 1, theta_res - 1)
    ft = tc - i0
    j0 = int(pc) % phi_res
    j1 = (j0 + 1) % phi_res
    fp = pc - int(pc)
    r = (
        (env[i0, j0, 0] * (1 - fp) + env[i0, j1, 0] * fp) * (1 - ft)
        + (env[i1, j0, 0] * (1 - fp) + env[i1, j1, 0] * fp) * ft
    )
    g = (
        (env[i0, j0, 1] * (1 - fp) + env[i0, j1, 1] * fp) * (1 - ft)
        + (env[i1, j0, 1] * (1 - fp) + env[i1, j1, 1] * fp) * ft
    )
    b = (
        (env[i0, j0, 2] * (1 - fp) + env[i0, j1, 2] * fp) * (1 - ft)
        + (env[i1, j0, 2] * (1 - fp) + env[i1, j1, 2] * fp) * ft
    )
    return r, g, b


@njit(cache=True)
def _sample_ggx_dir(nx, ny, nz, wox, woy, woz, rough, u1, u2):
    """GGX half-vector sample; returns (wi, pdf, valid)."""
    a = rough * rough
    denom = 1.0 + (a * a - 1.0) * u1
    cos_h = math.sqrt(min(max((1.0 - u1) / denom, 0.0), 1.0))
    sin_h = math.sqrt(max(0.0, 1.0 - cos_h * cos_h))
    phi = 2.0 * math.pi * u2
    t, bt = _onb(nx, ny, nz)
    lx, ly = sin_h * math.cos(phi), sin_h * math.sin(phi)
    hx = lx * t[0] + ly * bt[0] + cos_h * nx
    hy = lx * t[1] + ly * bt[1] + cos_h * ny
    hz = lx * t[2] + ly * bt[2] + cos_h * nz
    oh = wox * hx + woy * hy + woz * hz
    ix = 2.0 * oh * hx - wox
    iy = 2.0 * oh * hy - woy
    iz = 2.0 * oh * hz - woz
    ni = ix * nx + iy * ny + iz * nz
    valid = ni > 0.0 and oh > 1e-9
    d = _ggx_d(cos_h, rough)
    pdf = d * cos_h / max(4.0 * abs(oh), 1e-12)
    return ix, iy, iz, pdf, valid


@njit(cache=True, parallel=True)
def specular_from_env(env_maps, handles, pts, nrms, wos, roughs, n_samples,
                      seed, entity0):
    """Per-point GGX specular integral read from captured env maps.

    contribution = (1/N) sum E(w_j) f_s(w_j, w_o) (w_j . n) / pdf_j,
    invalid (below-horizon) samples contributing zero.
    """
    n = pts.shape[0]
    out = np.empty((n, 3), dtype=np.float64)
    s64 = np.uint64(seed)
    purpose = np.uint64(3) << np.uint64(56)
    for i in prange(n):
        stream = purpose + np.uint64(entity0 + i)
        nx, ny, nz = nrms[i, 0], nrms[i, 1], nrms[i, 2]
        wox, woy, woz = wos[i, 0], wos[i, 1], wos[i, 2]
        rough = roughs[i]
        env = env_maps[handles[i]]
        t, bt = _onb(nx, ny, nz)
        a0 = a1 = a2 = 0.0
        for j in range(n_samples):
            u1 = _rng(s64, stream, np.uint64(2 * j))
            u2 = _rng(s64, stream, np.uint64(2 * j + 1))
            ix, iy, iz, pdf, valid = _sample_ggx_dir(
                nx, ny, nz, wox, woy, woz, rough, u1, u2
            )
            if not valid or pdf <= 1e-12:
                continue
            fs = _spec_eval_vec(nx, ny, nz, ix, iy, iz, wox, woy, woz, rough)
            cos_i = ix * nx + iy * ny + iz * nz
            er, eg, eb = _env_bilinear(env, t, bt, nx, ny, nz, ix, iy, iz)
            w = fs * cos_i / pdf
            a0 += er * w
            a1 += eg * w
            a2 += eb * w
        out[i, 0] = a0 / n_samples
        out[i, 1] = a1 / n_samples
        out[i, 2] = a2 / n_samples
    return out


@njit(cache=True, parallel=True)
def env_bilinear_batch(env_maps, handles, frames_t, frames_bt, nrms, dirs):
    """Vectorized bilinear lookups (parity path for the python module)."""
    n = dirs.shape[0]
    out = np.empty((n, 3), dtype=np.float64)
    for i in prange(n):
        t = (frames_t[i, 0], frames_t[i, 1], frames_t[i, 2])
        bt = (frames_bt[i, 0], frames_bt[i, 1], frames_bt[i, 2])
        r, g, b = _env_bilinear(
            env_maps[handles[i]], t, bt,
            nrms[i, 0], nrms[i, 1], nrms[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2],
        )
        out[i, 0], out[i, 1], out[i, 2] = r, g, b
    return out
