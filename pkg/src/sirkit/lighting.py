"""Radiance queries, irradiance estimation, and per-point env maps.

The irradiance stored in the reconstruction is occlusion free: the
direct emitter term is integrated as if blockers were absent, while
indirect light keeps its true occlusion.  All direct-visibility
structure then lives in the shadow field, which multiplies the diffuse
term at render time.  Splitting this way keeps the shadow field
meaningful (its binarization is the geometric shadow mask) without
forcing shadowed pixels to black.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import core, grids

ENV_THETA_RES = 8
ENV_PHI_RES = 16


# ----------------------------------------------------- radiance sources


class RadianceSource:
    """Anything that can answer 'radiance arriving from direction d'."""

    def query(self, origins, dirs, streams=None, idx0s=None):
        raise NotImplementedError


class CallableSource(RadianceSource):
    """Adapter for closed-form radiance functions used in tests."""

    def __init__(self, fn):
        self.fn = fn

    def query(self, origins, dirs, streams=None, idx0s=None):
        return np.asarray(self.fn(origins, dirs), dtype=np.float64)


class PathTracedSource(RadianceSource):
    """Monte Carlo radiance from a scene, optionally through fitted
    material grids instead of the scene's own materials."""

    def __init__(self, scene, matpack=None, max_bounces=4, seed=0):
        self.scene = scene
        self.matpack = matpack if matpack is not None else K.gt_matpack(
            len(scene.primitives)
        )
        self.max_bounces = int(max_bounces)
        self.seed = int(seed)

    @property
    def sample_stride(self):
        # random dims one radiance query consumes; callers issuing many
        # queries per stream space their idx0s by this
        return K.BOUNCE_DIMS * self.max_bounces

    def query(self, origins, dirs, streams=None, idx0s=None):
        origins = np.ascontiguousarray(
            np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        )
        dirs = np.ascontiguousarray(
            np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        )
        n = origins.shape[0]
        if streams is None:
            streams = (
                np.uint64(core.make_stream(core.PURPOSE_MISC, 0))
                + np.arange(n, dtype=np.uint64)
            )
        if idx0s is None:
            idx0s = np.zeros(n, dtype=np.uint64)
        return K.radiance_batch(
            self.scene.pack(), self.matpack, origins, dirs,
            self.seed, np.asarray(streams, dtype=np.uint64),
            np.asarray(idx0s, dtype=np.uint64), self.max_bounces,
        )


# --------------------------------------------------------- irradiance


def compute_irradiance(source: RadianceSource, points, normals,
                       n_samples=512, seed=0, entity0=0):
    """Cosine-weighted irradiance at each point: (pi/N) sum L(w_j).

    Generic implementation over any radiance source; the sampling
    cancels the cosine factor so radiance is averaged directly.  Index
    layout (2 dims per direction, then the source's own stride) matches
    the compiled bake, so a path-traced source reproduces it exactly.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    qstride = 2 + getattr(source, "sample_stride", 0)
    j = np.arange(n_samples, dtype=np.uint64) * np.uint64(qstride)
    dirs = np.empty((n, n_samples, 3))
    streams = np.empty(n * n_samples, dtype=np.uint64)
    for i in range(n):
        stream = core.make_stream(core.PURPOSE_IRRADIANCE, entity0 + i)
        u = np.stack(
            [core.rng_u01(seed, stream, j), core.rng_u01(seed, stream, j + np.uint64(1))],
            axis=-1,
        )
        dirs[i], _ = core.sample_hemisphere_cosine(normals[i], u)
        streams[i * n_samples:(i + 1) * n_samples] = np.uint64(stream)
    flat_o = np.repeat(points, n_samples, axis=0)
    idx0s = np.tile(j + np.uint64(2), n)
    rad = source.query(
        flat_o, dirs.reshape(-1, 3), streams=streams, idx0s=idx0s
    ).reshape(n, n_samples, 3)
    return np.pi * rad.mean(axis=1)


def bake_irradiance(scene, points, normals, matpack=None, n_samples=512,
                    max_bounces=4, seed=0, entity0=0):
    """(total, direct) irradiance from the scene's own transport."""
    mats = matpack if matpack is not None else K.gt_matpack(len(scene.primitives))
    return K.irradiance_points(
        scene.pack(), mats,
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(normals, dtype=np.float64),
        int(n_samples), int(max_bounces), int(seed), int(entity0),
    )


def bake_unoccluded_direct(scene, points, normals, n_samples=256, seed=0,
                           entity0=0):
    """Direct emitter irradiance with visibility ignored."""
    return K.unoccluded_direct_points(
        scene.pack(),
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(normals, dtype=np.float64),
        int(n_samples), int(seed), int(entity0),
    )


def bake_shadow_free_irradiance(scene, points, normals, matpack=None,
                                n_samples=512, direct_samples=256,
                                max_bounces=4, seed=0, entity0=0):
    """Occlusion-free irradiance: true indirect plus unoccluded direct."""
    total, direct = bake_irradiance(
        scene, points, normals, matpack=matpack, n_samples=n_samples,
        max_bounces=max_bounces, seed=seed, entity0=entity0,
    )
    unocc = bake_unoccluded_direct(
        scene, points, normals, n_samples=direct_samples, seed=seed,
        entity0=entity0,
    )
    return total - direct + unocc


def fit_irradiance_field(points, values, res, bbox_lo, bbox_hi, seed=0,
                         iters=300, batch=8192):
    """Robust-fit a nonnegative trilinear grid to per-point irradiance."""
    return grids.fit_grid_l1(
        points, values, res, bbox_lo, bbox_hi,
        iters=iters, batch=batch, seed=seed,
        entity=1, vmin=0.0, vmax=None,
    )


# --------------------------------------------------------- env maps


@dataclass
class EnvMap:
    """Hemispherical incident-radiance map in a surface-local frame.

    Texel (i, j) covers theta in [i, i+1) * (pi/2)/theta_res measured
    from the normal and phi in [j, j+1) * 2pi/phi_res around it, with
    the sample at the texel center.
    """

    values: np.ndarray     # (theta_res, phi_res, 3) float32
    point: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    bitangent: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        for name in ("point", "normal", "tangent", "bitangent"):
            setattr(
                self, name,
                np.asarray(getattr(self, name), dtype=np.float64).reshape(3),
            )


def env_frames(normals):
    """Tangent/bitangent frames matching the capture kernels."""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    t, bt = core.build_onb(normals)
    return t, bt


def capture_env_map(source: RadianceSource, point, normal,
                    theta_res=ENV_THETA_RES, phi_res=ENV_PHI_RES):
    """Sample a radiance source at env texel centers (one query each)."""
    point = np.asarray(point, dtype=np.float64).reshape(3)
    normal = np.asarray(normal, dtype=np.float64).reshape(3)
    t, bt = core.build_onb(normal[None, :])
    t, bt = t[0], bt[0]
    theta = (np.arange(theta_res) + 0.5) / theta_res * (np.pi / 2.0)
    phi = (np.arange(phi_res) + 0.5) / phi_res * (2.0 * np.pi)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    local = np.stack(
        [np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)],
        axis=-1,
    ).reshape(-1, 3)
    dirs = local @ np.stack([t, bt, normal])
    vals = source.query(np.tile(point, (dirs.shape[0], 1)), dirs)
    return EnvMap(
        values=vals.reshape(theta_res, phi_res, 3).astype(np.float32),
        point=point, normal=normal, tangent=t, bitangent=bt,
    )


def bake_env_maps(scene, points, normals, matpack=None, spp=4,
                  theta_res=ENV_THETA_RES, phi_res=ENV_PHI_RES,
                  max_bounces=4, seed=0, entity0=0):
    """Path-traced env maps at many points: (n, theta_res, phi_res, 3)."""
    mats = matpack if matpack is not None else K.gt_matpack(len(scene.primitives))
    return K.capture_env_maps(
        scene.pack(), mats,
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(normals, dtype=np.float64),
        int(theta_res), int(phi_res), int(spp),
        int(max_bounces), int(seed), int(entity0),
    )


def query_env_bilinear(env_values, t, bt, n, dirs):
    """Bilinear env lookup with phi wraparound and theta clamping.

    Two layouts: a single map (theta_res, phi_res, 3) with dirs
    (..., 3) and shared frame vectors, or a batch (B, theta_res,
    phi_res, 3) with dirs (B, K, 3) and frames (B, 3) looked up
    per point.  Mirrors the compiled lookup exactly.
    """
    env_values = np.asarray(env_values, dtype=np.float64)
    theta_res, phi_res = env_values.shape[-3], env_values.shape[-2]
    dirs = np.asarray(dirs, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    bt = np.asarray(bt, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if env_values.ndim == 4:
        t, bt, n = t[:, None, :], bt[:, None, :], n[:, None, :]
    ct = np.clip(np.sum(dirs * n, axis=-1), 0.0, 1.0)
    theta = np.arccos(ct)
    phi = np.arctan2(np.sum(dirs * bt, axis=-1), np.sum(dirs * t, axis=-1))
    phi = np.where(phi < 0.0, phi + 2.0 * np.pi, phi)
    tc = np.clip(theta / (np.pi / 2.0) * theta_res - 0.5, 0.0, theta_res - 1.0)
    pc = phi / (2.0 * np.pi) * phi_res - 0.5
    pc = np.where(pc < 0.0, pc + phi_res, pc)
    i0 = np.minimum(tc.astype(np.int64), theta_res - 1)
    i1 = np.minimum(i0 + 1, theta_res - 1)
    ft = (tc - i0)[..., None]
    j0 = pc.astype(np.int64) % phi_res
    j1 = (j0 + 1) % phi_res
    fp = (pc - pc.astype(np.int64))[..., None]
    if env_values.ndim == 3:
        def g(a, b):
            return env_values[a, b]
    else:
        rows = np.arange(env_values.shape[0])[:, None]

        def g(a, b):
            return env_values[rows, a, b]
    v00, v01 = g(i0, j0), g(i0, j1)
    v10, v11 = g(i1, j0), g(i1, j1)
    return (v00 * (1 - fp) + v01 * fp) * (1 - ft) + (
        v10 * (1 - fp) + v11 * fp
    ) * ft


def env_map_irradiance(env_values):
    """Irradiance implied by an env map (cross-check tool).

    Treats the map as piecewise constant per texel; the cosine-weighted
    solid angle of a theta band integrates in closed form, so a constant
    map yields exactly pi * L.
    """
    env_values = np.asarray(env_values, dtype=np.float64)
    tr, pr = env_values.shape[-3], env_values.shape[-2]
    edges = np.arange(tr + 1) / tr * (np.pi / 2.0)
    w = 0.5 * np.diff(np.sin(edges) ** 2) * (2.0 * np.pi / pr)
    return np.einsum("...tpc,t->...c", env_values, w)
