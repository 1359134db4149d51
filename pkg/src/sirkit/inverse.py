"""Three-stage material estimation over trilinear field grids.

Phase 2 bakes irradiance and hard-shadow supervision at deduplicated
surface points and fits both grids.  Phase 3 optimizes albedo, a soft
shadow field, and roughness against cached HDR pixels in three stages:

  stage1  albedo only, hard shadow frozen, gradients masked to lit points
  stage2  soft shadow (initialized from hard) + albedo, instance albedo
          regularizer active
  stage3  roughness only, diffuse-term parameters frozen, instance
          roughness regularizer active

The predicted radiance per cached sample is

    L = A(x)/pi * S(x) * I(x) + specular(env_map, w_o, n, R(x))

with every field a query-clamped trilinear grid.  The specular term is
a GGX importance-sampled sum whose directions are drawn once per
iteration and then treated as constants, so the analytic gradient
differentiates exactly the estimator being evaluated.  Each direction
carries the density ratio D(R)/D(R0) relative to the roughness R0 it
was drawn at; the ratio is exactly 1 while fitting (directions are
redrawn every iteration), but differentiating it keeps the sampling
measure's roughness dependence, without which the gradient only sees
the Smith shadowing term and is biased toward rougher solutions.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import brdf, core, forward, grids, lighting
from . import shadow as shadow_mod
from .brdf import _smith_g1, fresnel_schlick

log = logging.getLogger(__name__)

STAGES = ("stage1", "stage2", "stage3")


@dataclass
class FieldSet:
    """The estimated scene decomposition: five grids over one bbox."""

    albedo: grids.DenseGrid       # rgb, query clamp [0, 1]
    roughness: grids.DenseGrid    # scalar, query clamp [0.01, 1]
    irradiance: grids.DenseGrid   # rgb, query clamp [0, inf)
    shadow_hard: grids.DenseGrid  # scalar, query clamp [0, 1]
    shadow_soft: grids.DenseGrid  # scalar, query clamp [0, 1]

    @property
    def shadow(self) -> grids.DenseGrid:
        """The shadow field used at render time."""
        return self.shadow_soft

    def copy(self) -> "FieldSet":
        return FieldSet(
            self.albedo.copy(), self.roughness.copy(),
            self.irradiance.copy(), self.shadow_hard.copy(),
            self.shadow_soft.copy(),
        )


def init_fields(bbox_lo, bbox_hi, res, irradiance=None, shadow_hard=None,
                albedo0=0.5, roughness0=0.5) -> FieldSet:
    """Fresh FieldSet; phase-2 grids drop in when already fitted."""
    shape = (res, res, res)

    def const(value, ch, vmin, vmax):
        return grids.DenseGrid(
            np.full(shape + (ch,), value, dtype=np.float64),
            np.asarray(bbox_lo, dtype=np.float64),
            np.asarray(bbox_hi, dtype=np.float64), vmin, vmax,
        )

    hard = shadow_hard if shadow_hard is not None else const(1.0, 1, 0.0, 1.0)
    return FieldSet(
        albedo=const(albedo0, 3, 0.0, 1.0),
        roughness=const(roughness0, 1, brdf.ROUGHNESS_MIN, brdf.ROUGHNESS_MAX),
        irradiance=(irradiance if irradiance is not None
                    else const(1.0, 3, 0.0, None)),
        shadow_hard=hard,
        shadow_soft=shadow_mod.init_soft_from_hard(hard),
    )


# --------------------------------------------------------------- cache


@dataclass
class SurfaceSampleCache:
    """Per-pixel training records plus deduplicated bake positions.

    Records keep their exact surface point; the deduplicated points
    (one per occupied dedup voxel and normal bucket) are where the
    irradiance/shadow bakes and the per-point specular env maps live.
    ``handle`` maps each record to its env map / bake point.
    """

    points: np.ndarray      # (P, 3) dedup positions
    normals: np.ndarray     # (P, 3)
    frames_t: np.ndarray    # (P, 3) env map tangent
    frames_b: np.ndarray    # (P, 3) env map bitangent
    env_maps: np.ndarray    # (P, tr, pr, 3) float32
    x: np.ndarray           # (O, 3) per-record surface point
    n: np.ndarray           # (O, 3)
    wo: np.ndarray          # (O, 3) toward the camera
    inst: np.ndarray        # (O,) instance ids
    c: np.ndarray           # (O, 3) observed HDR radiance
    handle: np.ndarray      # (O,) index into points/env_maps
    view: np.ndarray        # (O,) source view per record

    def __len__(self):
        return self.x.shape[0]


def build_sample_cache(scene, cameras, images, masks=None, dedup_res=64,
                       env_spp=1, max_bounces=2, seed=0) -> SurfaceSampleCache:
    """One record per non-emitter hit pixel across all views.

    Env maps are captured once per deduplicated point through the
    scene's own transport (the radiance oracle).
    """
    if masks is not None and len(masks) != len(cameras):
        raise ValueError("camera/mask count mismatch")
    if len(images) != len(cameras):
        raise ValueError("camera/image count mismatch")

    pk = scene.pack()
    span = scene.bbox_hi - scene.bbox_lo
    key_to_idx: dict = {}
    pts_list, nrm_list = [], []
    rec = {k: [] for k in ("x", "n", "wo", "inst", "c", "handle", "view")}

    for v, (cam, img) in enumerate(zip(cameras, images)):
        img = np.asarray(img)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(
                f"view {v}: image {img.shape[:2]} does not match camera "
                f"{(cam.height, cam.width)}"
            )
        if masks is not None:
            m = np.asarray(masks[v])
            if m.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"view {v}: mask size mismatch")
        _, prim, inst, pts, nrm = forward.primary_geometry(scene, cam)
        hit = prim >= 0
        surface = hit & (pk.prim_emissive[np.maximum(prim, 0)] == 0)
        if not np.any(surface):
            continue
        p = pts[surface]
        n = nrm[surface]
        cvals = img[surface].astype(np.float64)
        ivals = inst[surface]
        wo = cam.position - p
        wo /= np.linalg.norm(wo, axis=1, keepdims=True)

        cell = np.floor((p - scene.bbox_lo) / span * dedup_res).astype(np.int64)
        cell = np.clip(cell, 0, dedup_res - 1)
        nq = np.rint(n).astype(np.int64)  # 27 normal buckets
        for j in range(p.shape[0]):
            key = (cell[j, 0], cell[j, 1], cell[j, 2],
                   nq[j, 0], nq[j, 1], nq[j, 2])
            h = key_to_idx.get(key)
            if h is None:
                h = len(pts_list)
                key_to_idx[key] = h
                pts_list.append(p[j])
                nrm_list.append(n[j])
            rec["handle"].append(h)
        rec["x"].append(p)
        rec["n"].append(n)
        rec["wo"].append(wo)
        rec["inst"].append(ivals)
        rec["c"].append(cvals)
        rec["view"].append(np.full(p.shape[0], v, dtype=np.int32))

    if not pts_list:
        warnings.warn("sample cache is empty: no camera hit a surface")
        z3 = np.zeros((0, 3))
        return SurfaceSampleCache(
            points=z3, normals=z3, frames_t=z3, frames_b=z3,
            env_maps=np.zeros(
                (0, lighting.ENV_THETA_RES, lighting.ENV_PHI_RES, 3),
                dtype=np.float32,
            ),
            x=z3, n=z3, wo=z3,
            inst=np.zeros(0, dtype=np.int32), c=z3,
            handle=np.zeros(0, dtype=np.int64),
            view=np.zeros(0, dtype=np.int32),
        )

    points = np.asarray(pts_list)
    normals = np.asarray(nrm_list)
    t, bt = lighting.env_frames(normals)
    env = lighting.bake_env_maps(
        scene, points, normals, spp=env_spp, max_bounces=max_bounces,
        seed=seed, entity0=0,
    )
    log.info("sample cache: %d records, %d bake points",
             sum(a.shape[0] for a in rec["x"]), points.shape[0])
    return SurfaceSampleCache(
        points=points, normals=normals, frames_t=t, frames_b=bt,
        env_maps=env,
        x=np.concatenate(rec["x"]),
        n=np.concatenate(rec["n"]),
        wo=np.concatenate(rec["wo"]),
        inst=np.concatenate(rec["inst"]).astype(np.int32),
        c=np.concatenate(rec["c"]),
        handle=np.asarray(rec["handle"], dtype=np.int64),
        view=np.concatenate(rec["view"]),
    )


def reprojection_error(cache: SurfaceSampleCache, cameras) -> float:
    """Worst pixel distance between a record's point re-projected into
    its source view and that view's pixel grid (should be < 0.5 px for
    center rays)."""
    worst = 0.0
    for v, cam in enumerate(cameras):
        sel = cache.view == v
        if not np.any(sel):
            continue
        local = (cache.x[sel] - cam.position) @ cam.rotation
        px = local[:, 0] / local[:, 2] * cam.fx + cam.cx
        py = local[:, 1] / local[:, 2] * cam.fy + cam.cy
        # center rays land at pixel centers: distance to nearest center
        d = np.hypot(px - 0.5 - np.round(px - 0.5),
                     py - 0.5 - np.round(py - 0.5))
        worst = max(worst, float(d.max()))
    return worst


# -------------------------------------------------------------- config


@dataclass
class TrainConfig:
    lambda_albedo: float = 1e-4
    lambda_rough: float = 1e-4
    lr: tuple = (1e-3, 1e-3, 1e-3)
    iters: tuple = (1200, 1200, 900)
    batch: int = 2048
    mu: float = 3.0
    n_hemisphere: int = 512
    n_direct: int = 256
    n_importance: int = 16
    grid_res: int = 64
    dedup_res: int = 64
    phase2_iters: int = 400
    phase2_batch: int = 8192
    max_bounces: int = 2
    env_spp: int = 1
    warm_start: bool = True
    average_tail: float = 0.3  # tail fraction of iterates to average
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_albedo, self.lambda_rough) < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if min(self.batch, self.grid_res, self.n_hemisphere) <= 0:
            raise ValueError("sample budgets must be positive")

    @classmethod
    def appendix_preset(cls, **kw) -> "TrainConfig":
        """Alternative regularizer weights reported for synthetic scenes."""
        kw.setdefault("lambda_albedo", 3e-4)
        kw.setdefault("lambda_rough", 1e-3)
        return cls(**kw)


# ------------------------------------------------------------- phase 2


def phase2_fit(cache: SurfaceSampleCache, radiance, cfg: TrainConfig):
    """Bake irradiance and hard-shadow labels and fit both grids by l1
    descent; returns (irradiance grid, hard grid).

    A scene-backed source exposes emitter geometry, so its irradiance
    target is the shadow-free form (actual indirect plus unoccluded
    direct); the direct-visibility structure then lives entirely in the
    shadow fields, which keeps the shadow/albedo split stable at any
    grid resolution.  Opaque sources fall back to raw irradiance.

    Irradiance is baked at the deduplicated points only: shadow-free
    irradiance is smooth, so a sparse sampling resolves it.  Shadow
    labels are classified at every cache record instead, since hard
    boundaries at the target grid resolution need far denser
    supervision than the dedup set provides.
    """
    if len(cache) == 0:
        raise ValueError("cannot fit fields from an empty cache")
    pts, nrm = cache.points, cache.normals
    scene = getattr(radiance, "scene", None)
    if scene is not None:
        irr = lighting.bake_shadow_free_irradiance(
            scene, pts, nrm, matpack=radiance.matpack,
            n_samples=cfg.n_hemisphere, direct_samples=cfg.n_direct,
            max_bounces=radiance.max_bounces, seed=radiance.seed,
        )
        labels = shadow_mod.classify_hard_shadow_scene(
            scene, cache.x, cache.n, matpack=radiance.matpack, mu=cfg.mu,
            n_samples=cfg.n_hemisphere, max_bounces=radiance.max_bounces,
            seed=radiance.seed,
        )
        lo, hi = scene.bbox_lo, scene.bbox_hi
    else:
        eps = 1e-4 * float(np.linalg.norm(pts.max(0) - pts.min(0) + 1e-9))
        irr = lighting.compute_irradiance(
            radiance, pts + 2.0 * eps * nrm, nrm,
            n_samples=cfg.n_hemisphere, seed=cfg.seed,
        )
        labels = shadow_mod.classify_hard_shadow(
            radiance, cache.x + 2.0 * eps * cache.n, cache.n, mu=cfg.mu,
            n_samples=cfg.n_hemisphere, seed=cfg.seed,
        )
        pad = 0.05 * (pts.max(0) - pts.min(0) + 1e-9)
        lo, hi = pts.min(0) - pad, pts.max(0) + pad

    res = (cfg.grid_res,) * 3
    irr_grid, irr_rep = lighting.fit_irradiance_field(
        pts, irr, res, lo, hi, seed=cfg.seed,
        iters=cfg.phase2_iters, batch=cfg.phase2_batch,
    )
    hard_grid, hard_rep = shadow_mod.fit_hard_shadow_field(
        cache.x, labels, res, lo, hi, seed=cfg.seed,
        iters=cfg.phase2_iters, batch=cfg.phase2_batch,
    )
    log.info("phase2: irradiance l1 %.4f, hard shadow l1 %.4f",
             irr_rep.final_l1, hard_rep.final_l1)
    return irr_grid, hard_grid


# -------------------------------------------------------- regularizers


def _instance_means(values, inst):
    """Per-sample mean of `values` over its instance within the batch."""
    order = np.argsort(inst, kind="stable")
    uniq, start, count = np.unique(
        inst[order], return_index=True, return_counts=True
    )
    sums = np.add.reduceat(values[order], start, axis=0)
    means = sums / count[:, None] if values.ndim > 1 else sums / count
    pos = np.searchsorted(uniq, inst)
    return means[pos]


def albedo_regularizer(albedo, inst):
    """Instance-level value-uniformity penalty and its gradient.

    Each sample's rgb is compared against itself rescaled so its value
    (max channel) matches the instance's mean value; the mean is a
    constant during differentiation.  Samples with value ~ 0 are
    degenerate and contribute nothing.
    """
    a = np.asarray(albedo, dtype=np.float64)
    inst = np.asarray(inst)
    v = a.max(axis=1)
    ok = v > 1e-6
    loss_terms = np.zeros_like(a)
    grad = np.zeros_like(a)
    if np.any(ok):
        vbar_all = _instance_means(np.where(ok, v, 0.0), inst)
        nbar_all = _instance_means(ok.astype(np.float64), inst)
        vbar = vbar_all / np.maximum(nbar_all, 1e-12)  # mean over valid only
        s = np.where(ok, 1.0 - vbar / np.maximum(v, 1e-12), 0.0)
        r = a * s[:, None]
        loss_terms = np.abs(r)
        sgn = _sgn(r)
        b = a.shape[0]
        # d r_k / d a_j = s delta_kj + a_k vbar / v^2 [j == argmax]
        grad = sgn * s[:, None] / (3.0 * b)
        amax = np.argmax(a, axis=1)
        extra = (sgn * a).sum(axis=1) * vbar / np.maximum(v, 1e-12) ** 2
        np.add.at(grad, (np.arange(b), amax), np.where(ok, extra, 0.0) / (3.0 * b))
        grad[~ok] = 0.0
    loss = float(loss_terms.mean()) if a.size else 0.0
    return loss, grad


def roughness_regularizer(rough, inst):
    """Instance-level roughness uniformity (l1 to the detached mean)."""
    r = np.asarray(rough, dtype=np.float64).reshape(-1)
    inst = np.asarray(inst)
    rbar = _instance_means(r, inst)
    resid = r - rbar
    loss = float(np.mean(np.abs(resid))) if r.size else 0.0
    grad = np.sign(resid) * (np.abs(resid) > 1e-12) / max(r.size, 1)
    return loss, grad


# ---------------------------------------------------------- rendering


_SIGN_DEADBAND = 1e-12


def _sgn(x):
    return np.sign(x) * (np.abs(x) > _SIGN_DEADBAND)


def draw_specular_dirs(cache, fields, idx, n_importance, seed, tag):
    """GGX directions for a batch, drawn from the current roughness.

    Returned directions are constants thereafter: both the loss and its
    analytic gradient treat them as fixed vectors.  The roughness each
    row was drawn at comes back as the third element; the loss divides
    by its density so the estimator stays valid (and differentiable)
    when the grid roughness moves away from the draw.
    """
    b = idx.shape[0]
    if n_importance == 0 or b == 0:
        return (np.zeros((b, 0, 3)), np.zeros((b, 0), dtype=bool),
                np.full(b, 0.5))
    n = cache.n[idx]
    wo = cache.wo[idx]
    r = fields.roughness.query(cache.x[idx])[:, 0]
    stream = core.make_stream(core.PURPOSE_SPECULAR, tag)
    u = core.rng_block(seed, stream, 0, b * n_importance * 2).reshape(
        b, n_importance, 2
    )
    wi, _, valid = brdf.sample_ggx(
        n[:, None, :], wo[:, None, :], r[:, None], u
    )
    return wi, valid, r


def _spec_geometry(cache, idx, wi, valid):
    """Direction-dependent factors that do not involve roughness."""
    n = cache.n[idx][:, None, :]
    wo = cache.wo[idx][:, None, :]
    s = wi + wo
    h = core.normalize(s)
    n_i = np.sum(n * wi, axis=-1)
    n_o = np.sum(n * wo, axis=-1)
    n_h = np.sum(n * h, axis=-1)
    o_h = np.clip(0.5 * np.linalg.norm(s, axis=-1), 0.0, 1.0)
    ok = valid & (n_i > 1e-9) & (n_o > 1e-9) & (n_h > 1e-6)
    f = fresnel_schlick(o_h)
    base = np.where(ok, f * o_h / np.maximum(n_o * n_h, 1e-12), 0.0)
    env = lighting.query_env_bilinear(
        cache.env_maps[cache.handle[idx]].astype(np.float64),
        cache.frames_t[cache.handle[idx]],
        cache.frames_b[cache.handle[idx]],
        cache.normals[cache.handle[idx]],
        wi,
    )
    env = np.where(ok[..., None], env, 0.0)
    return base, env, n_i, n_o, ok


def _smith_terms(n_i, n_o, r):
    """G and dG/dR with k = r^4 / 2 (matching the BRDF module)."""
    k = 0.5 * r**4
    g1i = _smith_g1(np.maximum(n_i, 1e-12), k)
    g1o = _smith_g1(np.maximum(n_o, 1e-12), k)
    dg1i = -n_i * (1.0 - n_i) / (n_i + k * (1.0 - n_i)) ** 2
    dg1o = -n_o * (1.0 - n_o) / (n_o + k * (1.0 - n_o)) ** 2
    dk = 2.0 * r**3
    return g1i * g1o, (dg1i * g1o + g1i * dg1o) * dk


def render_loss(cache, fields, mode, batch_idx, cfg, iteration=0,
                spec_dirs=None):
    """Mean l1 render loss over a batch and its analytic grid gradients.

    mode selects the shadow source and which grids receive gradients:
    stage1 albedo (masked to hard-lit samples), stage2 albedo + soft
    shadow with the instance albedo regularizer, stage3 roughness with
    the instance roughness regularizer.  Gradients flow through the
    trilinear weights and query clamps; the irradiance grid is frozen
    throughout.
    """
    if mode not in STAGES:
        raise ValueError(f"unknown stage mode {mode!r}")
    idx = np.asarray(batch_idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty batch")
    x = cache.x[idx]
    cvals = cache.c[idx]
    b = idx.shape[0]

    corners, w = fields.albedo.interp_weights(x)  # all grids share layout
    flat_a = fields.albedo.values.reshape(-1, 3)
    raw_a = np.einsum("nk,nkc->nc", w, flat_a[corners])
    alb = np.clip(raw_a, 0.0, 1.0)
    flat_r = fields.roughness.values.reshape(-1)
    raw_r = np.einsum("nk,nk->n", w, flat_r[corners])
    rgh = np.clip(raw_r, brdf.ROUGHNESS_MIN, brdf.ROUGHNESS_MAX)
    irr = np.maximum(fields.irradiance.query(x), 0.0)
    shadow_grid = fields.shadow_hard if mode == "stage1" else fields.shadow_soft
    flat_s = shadow_grid.values.reshape(-1)
    raw_s = np.einsum("nk,nk->n", w, flat_s[corners])
    sdw = np.clip(raw_s, 0.0, 1.0)

    if spec_dirs is None:
        spec_dirs = draw_specular_dirs(
            cache, fields, idx, cfg.n_importance, cfg.seed,
            (STAGES.index(mode) << 40) + iteration,
        )
    wi, valid = spec_dirs
    ni = wi.shape[1]
    if ni > 0:
        base, env, n_i, n_o, ok = _spec_geometry(cache, idx, wi, valid)
        g, dg = _smith_terms(n_i, n_o, rgh[:, None])
        scale = base * g
        spec = np.einsum("nk,nkc->nc", scale, env) / ni
    else:
        spec = np.zeros((b, 3))

    pred = alb / np.pi * sdw[:, None] * irr + spec
    resid = pred - cvals
    loss = float(np.mean(np.abs(resid)))
    sgn = _sgn(resid) / (3.0 * b)

    grads = {}
    if mode in ("stage1", "stage2"):
        d_alb = sgn * sdw[:, None] * irr / np.pi
        if mode == "stage1":
            d_alb = d_alb * (sdw >= 0.5)[:, None]
        else:
            reg_loss, reg_grad = albedo_regularizer(alb, cache.inst[idx])
            loss += cfg.lambda_albedo * reg_loss
            d_alb = d_alb + cfg.lambda_albedo * reg_grad
        d_alb = d_alb * fields.albedo.active_mask(raw_a)
        grads["albedo"] = _scatter(fields.albedo, corners, w, d_alb)
    if mode == "stage2":
        d_sdw = np.sum(sgn * alb * irr, axis=1) / np.pi
        d_sdw = d_sdw * fields.shadow_soft.active_mask(raw_s[:, None])[:, 0]
        grads["shadow_soft"] = _scatter(
            fields.shadow_soft, corners, w, d_sdw[:, None]
        )
    if mode == "stage3":
        reg_loss, reg_grad = roughness_regularizer(rgh, cache.inst[idx])
        loss += cfg.lambda_rough * reg_loss
        if ni > 0:
            dspec = np.einsum("nk,nkc->nc", base * dg, env) / ni
            d_rgh = np.sum(sgn * dspec, axis=1)
        else:
            d_rgh = np.zeros(b)
        d_rgh = d_rgh + cfg.lambda_rough * reg_grad
        d_rgh = d_rgh * fields.roughness.active_mask(raw_r[:, None])[:, 0]
        grads["roughness"] = _scatter(
            fields.roughness, corners, w, d_rgh[:, None]
        )
    return loss, grads


def _scatter(grid, corners, w, d_out):
    g = np.zeros_like(grid.values).reshape(-1, grid.channels)
    contrib = w[:, :, None] * d_out[:, None, :]
    np.add.at(g, corners.reshape(-1), contrib.reshape(-1, grid.channels))
    return g.reshape(grid.values.shape)


# ------------------------------------------------------------- phase 3


def warm_start_albedo(cache, fields):
    """Initialize albedo nodes from observed radiance on lit records;
    cells seen only in shadow fall back to their instance's lit mean.

    In hard shadow the render loss is flat along the albedo/shadow
    product, so the initialization decides the split; borrowing the
    instance's lit albedo is exactly what the instance regularizer
    prefers and costs no iterations.
    """
    irr = np.maximum(fields.irradiance.query(cache.x), 1e-6)
    hard = fields.shadow_hard.query(cache.x)[:, 0]
    lit = hard >= 0.5
    implied = np.clip(np.pi * cache.c / irr, 0.0, 1.0)
    res = fields.albedo.res
    lo, hi = fields.albedo.bbox_lo, fields.albedo.bbox_hi
    if not np.any(lit):
        return
    num = grids.scatter_average(
        cache.x[lit], implied[lit], res, lo, hi, default=np.nan
    )
    covered = np.isfinite(num[..., 0])

    fill = np.full_like(num, 0.5)
    dark = ~lit
    if np.any(dark):
        inst_ids = np.unique(cache.inst[dark])
        means = {}
        for i in inst_ids:
            sel = lit & (cache.inst == i)
            means[int(i)] = (implied[sel].mean(axis=0) if np.any(sel)
                             else np.full(3, 0.5))
        vals = np.stack([means[int(i)] for i in cache.inst[dark]])
        filled = grids.scatter_average(
            cache.x[dark], vals, res, lo, hi, default=np.nan
        )
        has = np.isfinite(filled[..., 0])
        fill[has] = filled[has]
    fields.albedo.values[...] = np.where(covered[..., None], num, fill)
    fields.albedo.project()


def run_phase3(cache, fields: FieldSet, cfg: TrainConfig, ablation=None,
               history=None, on_stage_end=None) -> FieldSet:
    """Staged optimization; returns a new FieldSet.

    ablation:
      "no_shadow"  both shadow fields pinned to 1 (stage-1 mask off)
      "no_soft"    stage 2 skipped; soft stays the hard copy
    on_stage_end: called with (mode, fields) after each stage, e.g. to
    write checkpoints.
    """
    if ablation not in (None, "no_shadow", "no_soft"):
        raise ValueError(f"unknown ablation {ablation!r}")
    out = fields.copy()
    if ablation == "no_shadow":
        out.shadow_hard.values[...] = 1.0
    if cfg.warm_start:
        warm_start_albedo(cache, out)

    n_rec = len(cache)
    if n_rec == 0:
        raise ValueError("empty cache")
    curves = history if history is not None else {}

    for s, mode in enumerate(STAGES):
        if mode == "stage2":
            out.shadow_soft = shadow_mod.init_soft_from_hard(out.shadow_hard)
            if ablation in ("no_shadow", "no_soft"):
                # refine albedo under the fixed shadow; no shadow params
                pass
        active = {
            "stage1": ["albedo"],
            "stage2": ["albedo", "shadow_soft"],
            "stage3": ["roughness"],
        }[mode]
        if mode == "stage2" and ablation in ("no_shadow", "no_soft"):
            if ablation == "no_soft":
                if on_stage_end is not None:
                    on_stage_end(mode, out)
                continue
            active = ["albedo"]
        opts = {name: grids.Adam(lr=cfg.lr[s]) for name in active}
        stream = core.make_stream(core.PURPOSE_FIT, (s + 1) << 8)
        curve = []
        # a sign gradient keeps Adam's steps lr-sized even at the
        # optimum, so nodes wander there; averaging the tail iterates
        # removes that variance without touching the fixed rate
        n_it = cfg.iters[s]
        avg_from = n_it - max(1, int(n_it * cfg.average_tail))
        acc = {name: 0.0 for name in active}
        n_acc = 0
        for it in range(n_it):
            u = core.rng_block(cfg.seed, stream, it * cfg.batch, cfg.batch)
            idx = np.minimum((u * n_rec).astype(np.int64), n_rec - 1)
            loss, grads = render_loss(
                cache, out, mode, idx, cfg, iteration=it
            )
            for name in active:
                if name not in grads:
                    continue
                grid = getattr(out, name)
                opts[name].step(grid.values, grads[name])
                grid.project()
            if it >= avg_from and cfg.average_tail > 0:
                for name in active:
                    acc[name] = acc[name] + getattr(out, name).values
                n_acc += 1
            if it % 50 == 0 or it == n_it - 1:
                curve.append((it, loss))
        if n_acc > 0 and cfg.average_tail > 0:
            for name in active:
                grid = getattr(out, name)
                grid.values[...] = acc[name] / n_acc
                grid.project()
        curves[mode] = curve
        if curve:
            log.info("%s: l1 %.4f -> %.4f", mode, curve[0][1], curve[-1][1])
        if on_stage_end is not None:
            on_stage_end(mode, out)
    return out


# ----------------------------------------------------- gradient check


def _phase2_style_loss(grid, pts, targets):
    raw = grid.query_raw(pts)
    pred = np.clip(raw, grid.vmin, grid.vmax)
    resid = pred - targets
    loss = float(np.mean(np.abs(resid)))
    d_out = _sgn(resid) * grid.active_mask(raw) / resid.size
    idx, w = grid.interp_weights(pts)
    return loss, _scatter(grid, idx, w, d_out)


def grad_check(fields, cache, stage, n_params=32, seed=0, batch=256,
               h_rel=1e-3):
    """Worst relative error between analytic and central finite
    difference gradients on randomly chosen active parameters.

    Parameters are drawn from nodes with meaningful interpolation
    weight in the probe batch, skipping those whose perturbation would
    cross an l1 kink or a query clamp (the loss is not differentiable
    there, so no checker convention is meaningful).
    """
    modes = STAGES + ("phase2_irradiance", "phase2_shadow")
    if stage not in modes:
        raise ValueError(f"unknown stage {stage!r}")
    rng_stream = core.make_stream(core.PURPOSE_MISC, 77)
    u = core.rng_block(seed, rng_stream, 0, batch)
    idx = np.minimum((u * len(cache)).astype(np.int64), len(cache) - 1)
    if stage == "stage1":
        # probe the objective stage 1 optimizes: lit samples only
        # (shadowed residuals are detached from the albedo by design)
        lit = fields.shadow_hard.query(cache.x[idx])[:, 0] >= 0.5
        if np.any(lit):
            idx = idx[lit]

    if stage.startswith("phase2"):
        if stage == "phase2_irradiance":
            grid = fields.irradiance
            targets = cache.c[idx]
        else:
            grid = fields.shadow_hard
            targets = np.clip(
                cache.c[idx].sum(axis=1, keepdims=True), 0.0, 1.0
            )
        pts = cache.x[idx]

        def evaluate(g):
            return _phase2_style_loss(g, pts, targets)

        base_grid = grid
        param_name = None
    else:
        frozen = draw_specular_dirs(cache, fields, idx, 16, seed, 991)
        # instance means are constants during differentiation, so they
        # must not move under the probe either: check the render term
        cfg = TrainConfig(n_importance=frozen[0].shape[1], seed=seed,
                          lambda_albedo=0.0, lambda_rough=0.0)
        param_name = {"stage1": "albedo", "stage2": "shadow_soft",
                      "stage3": "roughness"}[stage]

        def evaluate(g):
            probe = replace(fields, **{param_name: g})
            loss, grads = render_loss(
                cache, probe, stage, idx, cfg, spec_dirs=frozen
            )
            return loss, grads[param_name]

        base_grid = getattr(fields, param_name)

    loss0, g0 = evaluate(base_grid)
    flat_g = g0.reshape(-1)
    idxs, w = base_grid.interp_weights(cache.x[idx])
    touched = np.zeros(flat_g.size // base_grid.channels, dtype=np.float64)
    np.add.at(touched, idxs.reshape(-1), w.reshape(-1))
    candidates = np.nonzero(touched > 0.05)[0]
    if candidates.size == 0:
        return 0.0

    order = core.rng_block(seed, rng_stream, 1000, candidates.size)
    candidates = candidates[np.argsort(order, kind="stable")]
    worst = 0.0
    checked = 0
    vals = base_grid.values.reshape(-1, base_grid.channels)
    for node in candidates:
        if checked >= n_params:
            break
        ch = checked % base_grid.channels
        p0 = vals[node, ch]
        h = h_rel * max(abs(p0), 1.0)
        ana = g0.reshape(-1, base_grid.channels)[node, ch]

        def loss_at(value):
            probe = base_grid.copy()
            probe.values.reshape(-1, base_grid.channels)[node, ch] = value
            return evaluate(probe)[0]

        lp, lm = loss_at(p0 + h), loss_at(p0 - h)
        num = (lp - lm) / (2.0 * h)
        if ana == 0.0 and abs(num) < 1e-12:
            checked += 1
            continue
        # reject kink crossings: the two-sided slopes must agree
        l0 = loss0
        slope_r = (lp - l0) / h
        slope_l = (l0 - lm) / h
        if abs(slope_r - slope_l) > 1e-3 * max(abs(num), 1e-9):
            continue
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
        worst = max(worst, rel)
        checked += 1
    return worst
