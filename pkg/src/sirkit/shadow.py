"""Hard-shadow classification and the differentiable shadow field.

A point is lit when some direction on its hemisphere carries radiance
at or above a threshold; with emitters far brighter than any reflecting
surface this is a robust direct-visibility test.  Labels seed a dense
soft-shadow grid that later training refines into fractional visibility.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K
from . import core, grids

DEFAULT_RADIANCE_THRESHOLD = 3.0
DEFAULT_DIRECTIONS = 512


def classify_hard_shadow(source, points, normals,
                         mu=DEFAULT_RADIANCE_THRESHOLD,
                         n_samples=DEFAULT_DIRECTIONS, seed=0, entity0=0):
    """1 where max over sampled directions of summed rgb radiance >= mu.

    Generic implementation over any radiance source, uniform hemisphere
    directions; the index layout matches the compiled classifier so a
    path-traced source reproduces it exactly (given pre-offset points).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    qstride = 2 + getattr(source, "sample_stride", 0)
    j = np.arange(n_samples, dtype=np.uint64) * np.uint64(qstride)
    labels = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        stream = core.make_stream(core.PURPOSE_SHADOW, entity0 + i)
        u = np.stack(
            [core.rng_u01(seed, stream, j),
             core.rng_u01(seed, stream, j + np.uint64(1))],
            axis=-1,
        )
        dirs, _ = core.sample_hemisphere_uniform(normals[i], u)
        rad = source.query(
            np.tile(points[i], (n_samples, 1)), dirs,
            streams=np.full(n_samples, stream, dtype=np.uint64),
            idx0s=j + np.uint64(2),
        )
        if np.any(rad.sum(axis=-1) >= mu):
            labels[i] = 1
    return labels


def classify_hard_shadow_scene(scene, points, normals, matpack=None,
                               mu=DEFAULT_RADIANCE_THRESHOLD,
                               n_samples=DEFAULT_DIRECTIONS,
                               max_bounces=4, seed=0, entity0=0):
    """Compiled classifier running the scene's own transport."""
    mats = matpack if matpack is not None else K.gt_matpack(len(scene.primitives))
    return K.classify_points(
        scene.pack(), mats,
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(normals, dtype=np.float64),
        int(n_samples), float(mu), int(max_bounces), int(seed), int(entity0),
    )


def fit_hard_shadow_field(points, labels, res, bbox_lo, bbox_hi, seed=0,
                          iters=300, batch=8192):
    """Fit a [0, 1] grid to binary labels; robust loss keeps cell values
    near the local label median so binarizing recovers the majority."""
    targets = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    return grids.fit_grid_l1(
        points, targets, res, bbox_lo, bbox_hi,
        iters=iters, batch=batch, seed=seed,
        entity=2, vmin=0.0, vmax=1.0,
    )


def init_soft_from_hard(hard_grid: grids.DenseGrid) -> grids.DenseGrid:
    """Soft shadow field initialized from the hard classification."""
    return grids.DenseGrid(
        values=hard_grid.values.copy(),
        bbox_lo=hard_grid.bbox_lo.copy(),
        bbox_hi=hard_grid.bbox_hi.copy(),
        vmin=0.0,
        vmax=1.0,
    )


def emitter_visibility(scene, points, normals, n_samples=64, seed=0,
                       entity0=0):
    """Fraction of emitter-directed rays that reach each emitter,
    maximized over emitters.  This is the geometric reference for
    shadow labels: visible means any unoccluded sight line exists."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    nrm = np.ascontiguousarray(normals, dtype=np.float64)
    out = np.zeros(pts.shape[0], dtype=np.float64)
    for e_prim in scene.emitter_prims:
        frac = K.visibility_fraction(
            scene.pack(), pts, nrm, int(e_prim), int(n_samples),
            int(seed), int(entity0),
        )
        out = np.maximum(out, frac)
    return out
