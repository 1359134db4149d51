"""Forward rendering: path tracing, decomposed field rendering, edits.

The decomposed renderer turns fitted fields into images with the same
shading model used during fitting: per pixel,

    combined = albedo/pi * shadow * irradiance + specular

where the specular term importance-samples a freshly captured per-pixel
environment map with the fitted roughness.  Relighting rebakes the
irradiance field and env maps under new emission while geometry-bound
fields (albedo, roughness, shadow) carry over unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels as K
from . import core, lighting, shadow as shadow_mod
from .geometry import Material, Primitive, SdfScene


@dataclass
class RenderConfig:
    spp: int = 256
    max_bounces: int = 4
    env_spp: int = 4
    spec_samples: int = 64
    seed: int = 0


@dataclass
class RenderBuffers:
    """Decomposed render output; combined == diffuse + specular exactly
    (float32 addition of the stored buffers)."""

    combined: np.ndarray    # (h, w, 3) float32
    diffuse: np.ndarray     # (h, w, 3) float32
    specular: np.ndarray    # (h, w, 3) float32
    albedo: np.ndarray      # (h, w, 3) float32
    roughness: np.ndarray   # (h, w) float32
    irradiance: np.ndarray  # (h, w, 3) float32
    shadow: np.ndarray      # (h, w) float32
    normal: np.ndarray      # (h, w, 3) float32
    depth: np.ndarray       # (h, w) float32, 0 where no hit
    instances: np.ndarray   # (h, w) int32, -1 where no hit


def _camera_args(camera):
    rot = np.ascontiguousarray(camera.rotation, dtype=np.float64)
    pos = np.ascontiguousarray(camera.position, dtype=np.float64)
    return (
        rot, pos, float(camera.fx), float(camera.fy),
        float(camera.cx), float(camera.cy),
        int(camera.width), int(camera.height),
    )


def view_entity(view_id: int, offset: int = 0) -> int:
    """Entity ids partition per view so streams never collide."""
    return (int(view_id) << 32) + offset


def path_trace(scene, camera, spp=256, max_bounces=4, seed=0, view_id=0,
               matpack=None):
    """Path-traced HDR image (h, w, 3) float32; one stream per pixel."""
    mats = matpack if matpack is not None else K.gt_matpack(len(scene.primitives))
    stream_base = core.make_stream(core.PURPOSE_CAMERA, view_entity(view_id))
    img = K.render_image(
        scene.pack(), mats, *_camera_args(camera),
        int(spp), int(max_bounces), int(seed), stream_base,
    )
    return img.astype(np.float32)


def primary_geometry(scene, camera):
    """Center-ray hit data per pixel as (h, w, ...) arrays."""
    h, w = camera.height, camera.width
    ts, prim, inst, pts, nrm = K.primary_hits(scene.pack(), *_camera_args(camera))
    return (
        ts.reshape(h, w),
        prim.reshape(h, w),
        inst.reshape(h, w),
        pts.reshape(h, w, 3),
        nrm.reshape(h, w, 3),
    )


def render_gt_buffers(scene, camera, vis_samples=64, seed=0, view_id=0):
    """Reference per-pixel products straight from the scene definition.

    Returns dict with albedo, roughness, normal, depth, instances,
    emitter mask, emitter visibility fraction, and the binary shadow
    mask (visibility >= 0.5 counts as lit).
    """
    h, w = camera.height, camera.width
    ts, prim, inst, pts, nrm = primary_geometry(scene, camera)
    hit = prim >= 0
    pk = scene.pack()
    safe = np.maximum(prim, 0)
    mat = pk.prim_material[safe]
    albedo = np.where(hit[..., None], pk.mat_albedo[mat], 0.0)
    rough = np.where(hit, pk.mat_rough[mat], 0.0)
    emitter = hit & (pk.prim_emissive[safe] != 0)
    surface = hit & ~emitter
    vis = np.zeros((h, w), dtype=np.float64)
    if np.any(surface):
        vis_flat = shadow_mod.emitter_visibility(
            scene, pts[surface], nrm[surface],
            n_samples=vis_samples, seed=seed,
            entity0=view_entity(view_id),
        )
        vis[surface] = vis_flat
    return {
        "albedo": albedo.astype(np.float32),
        "roughness": rough.astype(np.float32),
        "normal": nrm.astype(np.float32),
        "depth": np.where(hit, ts, 0.0).astype(np.float32),
        "instances": inst,
        "emitter_mask": emitter,
        "surface_mask": surface,
        "visibility": vis.astype(np.float32),
        "shadow_binary": (vis >= 0.5).astype(np.uint8),
        "points": pts,
    }


def render_decomposed(scene, camera, fields, cfg: RenderConfig | None = None,
                      view_id=0, transport_matpack=None, shadow_override=None,
                      material_override_mask=None):
    """Render fitted fields through the decomposed shading model.

    transport_matpack controls the materials seen by env-map capture
    rays (defaults to the fitted grids).  shadow_override, when given,
    replaces the shadow-grid lookup per pixel (flat over surface
    pixels is not expected; it is a full (h, w) array).
    material_override_mask marks pixels whose primitive keeps scene
    materials (edited/inserted objects).
    """
    cfg = cfg or RenderConfig()
    h, w = camera.height, camera.width
    ts, prim, inst, pts, nrm = primary_geometry(scene, camera)
    pk = scene.pack()
    hit = prim >= 0
    safe = np.maximum(prim, 0)
    emitter = hit & (pk.prim_emissive[safe] != 0)
    surface = hit & ~emitter
    if transport_matpack is None:
        transport_matpack = matpack_from_fields(scene, fields)

    diffuse = np.zeros((h, w, 3), dtype=np.float64)
    specular = np.zeros((h, w, 3), dtype=np.float64)
    albedo_img = np.zeros((h, w, 3), dtype=np.float64)
    rough_img = np.zeros((h, w), dtype=np.float64)
    irr_img = np.zeros((h, w, 3), dtype=np.float64)
    shadow_img = np.zeros((h, w), dtype=np.float64)

    diffuse[~hit] = scene.ambient
    diffuse[emitter] = pk.prim_emission[safe[emitter]]

    if np.any(surface):
        p = pts[surface]
        n = nrm[surface]
        alb = np.clip(fields.albedo.query(p), 0.0, 1.0)
        rgh = np.clip(fields.roughness.query(p)[:, 0], 0.01, 1.0)
        irr = np.maximum(fields.irradiance.query(p), 0.0)
        sdw = np.clip(fields.shadow.query(p)[:, 0], 0.0, 1.0)
        if shadow_override is not None:
            sdw = np.asarray(shadow_override, dtype=np.float64)[surface]
        if material_override_mask is not None:
            ovr = np.asarray(material_override_mask, dtype=bool)[surface]
            mat = pk.prim_material[safe[surface]]
            alb[ovr] = pk.mat_albedo[mat[ovr]]
            rgh[ovr] = pk.mat_rough[mat[ovr]]
        diffuse[surface] = alb / np.pi * sdw[:, None] * irr

        env = K.capture_env_maps(
            pk, transport_matpack,
            np.ascontiguousarray(p), np.ascontiguousarray(n),
            lighting.ENV_THETA_RES, lighting.ENV_PHI_RES,
            int(cfg.env_spp), int(cfg.max_bounces), int(cfg.seed),
            view_entity(view_id),
        )
        cam_to_pix = p - camera.position
        wos = -cam_to_pix / np.linalg.norm(cam_to_pix, axis=-1, keepdims=True)
        spec = K.specular_from_env(
            env, np.arange(env.shape[0], dtype=np.int64),
            np.ascontiguousarray(p), np.ascontiguousarray(n),
            np.ascontiguousarray(wos), np.ascontiguousarray(rgh),
            int(cfg.spec_samples), int(cfg.seed), view_entity(view_id),
        )
        specular[surface] = spec
        albedo_img[surface] = alb
        rough_img[surface] = rgh
        irr_img[surface] = irr
        shadow_img[surface] = sdw

    d32 = diffuse.astype(np.float32)
    s32 = specular.astype(np.float32)
    return RenderBuffers(
        combined=d32 + s32,
        diffuse=d32,
        specular=s32,
        albedo=albedo_img.astype(np.float32),
        roughness=rough_img.astype(np.float32),
        irradiance=irr_img.astype(np.float32),
        shadow=shadow_img.astype(np.float32),
        normal=nrm.astype(np.float32),
        depth=np.where(hit, ts, 0.0).astype(np.float32),
        instances=inst,
    )


def matpack_from_fields(scene, fields, gt_prim_indices=()):
    gt = np.zeros(len(scene.primitives), dtype=np.uint8)
    for i in gt_prim_indices:
        gt[i] = 1
    return K.grid_matpack(
        fields.albedo.values,
        fields.roughness.values,
        fields.albedo.bbox_lo,
        fields.albedo.bbox_hi,
        gt,
    )


# ------------------------------------------------------------- edits


def copy_scene(scene: SdfScene) -> SdfScene:
    prims = [
        Primitive(
            shape=p.shape, params=p.params.copy(), position=p.position.copy(),
            rotation=p.rotation.copy(), scale=p.scale,
            instance_id=p.instance_id, material_id=p.material_id,
            emission=p.emission.copy(),
        )
        for p in scene.primitives
    ]
    mats = [
        Material(albedo=m.albedo.copy(), roughness=m.roughness,
                 specular=m.specular)
        for m in scene.materials
    ]
    return SdfScene(
        primitives=prims, materials=mats,
        bbox_lo=scene.bbox_lo.copy(), bbox_hi=scene.bbox_hi.copy(),
        csg=list(scene.csg), ambient=scene.ambient.copy(),
    )


def set_emission(scene: SdfScene, instance_id: int, emission) -> SdfScene:
    """New scene with the emitter instance's emission replaced."""
    out = copy_scene(scene)
    matched = False
    for p in out.primitives:
        if p.instance_id == instance_id and p.is_emitter:
            p.emission = np.asarray(emission, dtype=np.float64).reshape(3)
            matched = True
    if not matched:
        raise ValueError(f"no emitter with instance id {instance_id}")
    return out


def replace_material(scene: SdfScene, instance_id: int,
                     material: Material) -> SdfScene:
    """New scene where one instance uses a freshly appended material."""
    out = copy_scene(scene)
    out.materials.append(material)
    new_id = len(out.materials) - 1
    matched = False
    for p in out.primitives:
        if p.instance_id == instance_id:
            p.material_id = new_id
            matched = True
    if not matched:
        raise ValueError(f"no primitive with instance id {instance_id}")
    out.invalidate()
    return out


def move_instance(scene: SdfScene, instance_id: int,
                  translation) -> SdfScene:
    """New scene with every primitive of one instance translated."""
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    out = copy_scene(scene)
    matched = False
    for p in out.primitives:
        if p.instance_id != instance_id:
            continue
        matched = True
        if p.shape == "plane":
            # dot(n, x) + off = 0 shifted by t moves the offset
            p.params = p.params.copy()
            p.params[3] -= float(np.dot(p.params[:3], t))
        else:
            p.position = p.position + t
    if not matched:
        raise ValueError(f"no primitive with instance id {instance_id}")
    out.invalidate()
    return out


def insert_object(scene: SdfScene, prim: Primitive,
                  material: Material) -> SdfScene:
    """New scene with an extra primitive unioned in at a new instance."""
    out = copy_scene(scene)
    out.materials.append(material)
    prim.material_id = len(out.materials) - 1
    prim.instance_id = out.n_instances
    out.primitives.append(prim)
    out.csg = list(out.csg) + [("prim", len(out.primitives) - 1), ("union",)]
    out.invalidate()
    return out


# ----------------------------------------------------------- relight


def relight_fields(scene_edited, fields, cache, bake_seed=0,
                   irr_samples=512, direct_samples=256, env_spp=4,
                   max_bounces=4, reclassify=True, mu=3.0):
    """Rebake light-dependent fields under edited emitters.

    Albedo and roughness are intrinsic and carry over; the irradiance
    grid is rebaked through the fitted materials, and (unless
    reclassify is off) the hard-shadow labels are recomputed against
    the edited emitters with the soft field re-seeded from them.  With
    identical seeds an unchanged scene rebakes bit-identically, and
    pure emission scaling scales the bakes exactly.
    """
    matpack = matpack_from_fields(scene_edited, fields)
    irr_pts = lighting.bake_shadow_free_irradiance(
        scene_edited, cache.points, cache.normals, matpack=matpack,
        n_samples=irr_samples, direct_samples=direct_samples,
        max_bounces=max_bounces, seed=bake_seed,
    )
    res = fields.irradiance.values.shape[:3]
    lo, hi = fields.irradiance.bbox_lo, fields.irradiance.bbox_hi
    irr_grid, _ = lighting.fit_irradiance_field(
        cache.points, irr_pts, res, lo, hi, seed=bake_seed,
    )
    updates = {"irradiance": irr_grid}
    if reclassify:
        labels = shadow_mod.classify_hard_shadow_scene(
            scene_edited, cache.points, cache.normals, matpack=matpack,
            mu=mu, n_samples=irr_samples, max_bounces=max_bounces,
            seed=bake_seed,
        )
        hard_grid, _ = shadow_mod.fit_hard_shadow_field(
            cache.points, labels, res, lo, hi, seed=bake_seed,
        )
        updates["shadow_hard"] = hard_grid
        updates["shadow_soft"] = shadow_mod.init_soft_from_hard(hard_grid)
    return replace_fields(fields, **updates)


def replace_fields(fields, **updates):
    return replace(fields, **updates)
