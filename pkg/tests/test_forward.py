"""Forward rendering: path tracer, reference buffers, decomposed model,
and scene-edit operations."""

import numpy as np
import pytest
from scipy import integrate, ndimage

from sirkit import core, forward, geometry, grids, lighting, scenes


def constant_fields(albedo, rough, irr, sdw, lo, hi, res=4):
    def g(value, ch, vmin, vmax):
        vals = np.full((res, res, res, ch), value, dtype=np.float64)
        return grids.DenseGrid(values=vals, bbox_lo=np.asarray(lo, float),
                               bbox_hi=np.asarray(hi, float),
                               vmin=vmin, vmax=vmax)

    class F:
        pass

    f = F()
    f.albedo = g(albedo, 3, 0.0, 1.0)
    f.roughness = g(rough, 1, 0.01, 1.0)
    f.irradiance = g(irr, 3, 0.0, None)
    f.shadow = g(sdw, 1, 0.0, 1.0)
    return f


class TestPathTrace:
    def test_lambertian_ambient_plane_is_exact(self):
        scene = scenes.build_ambient_plane_scene(
            albedo=(0.4, 0.6, 0.2), ambient=(1.0, 1.0, 2.0)
        )
        cam = scenes.plane_camera()
        img = forward.path_trace(scene, cam, spp=8, max_bounces=3, seed=0)
        _, prim, _, _, _ = forward.primary_geometry(scene, cam)
        hit = prim >= 0
        assert np.any(hit)
        expect = np.array([0.4, 0.6, 0.2]) * np.array([1.0, 1.0, 2.0])
        assert np.allclose(img[hit], expect.astype(np.float32), atol=1e-6)

    def test_furnace_emitter_pixels_exact(self):
        scene = scenes.build_furnace_scene(emission=1.5)
        cam = scenes.furnace_camera()
        img = forward.path_trace(scene, cam, spp=16, max_bounces=2, seed=3)
        _, prim, _, _, _ = forward.primary_geometry(scene, cam)
        interior = ndimage.binary_erosion(prim == 1, np.ones((3, 3)))
        assert interior.sum() > 100
        assert np.allclose(img[interior], 1.5, atol=1e-6)

    def test_direct_lighting_matches_quadrature(self):
        # diffuse floor lit by a rectangular panel; single-bounce NEE
        # against a deterministic flux integral over the panel face
        prims = [
            geometry.Primitive(shape="plane", params=[0, 1, 0, 0],
                               material_id=0),
            geometry.Primitive(shape="box", params=[0.5, 0.02, 0.4],
                               position=[0.3, 2.93, 0.0], instance_id=1,
                               emission=[12.0, 12.0, 12.0]),
        ]
        mats = [geometry.Material(albedo=np.array([0.62, 0.58, 0.54]),
                                  roughness=0.45, specular=False)]
        scene = geometry.SdfScene(
            primitives=prims, materials=mats,
            bbox_lo=np.array([-4.0, -0.5, -4.0]),
            bbox_hi=np.array([4.0, 4.0, 4.0]),
        )
        target = np.array([0.0, 0.0, 0.5])
        panel_y = 2.93 - 0.02

        def integrand(z, x):
            d2 = (x - target[0]) ** 2 + panel_y**2 + (z - target[2]) ** 2
            return 12.0 * panel_y**2 / d2 / d2

        e_ref, _ = integrate.dblquad(integrand, -0.2, 0.8, -0.4, 0.4)
        src = lighting.PathTracedSource(scene, max_bounces=1, seed=9)
        n = 4000
        o = np.tile(target + [0.0, 1.0, 0.0], (n, 1))
        d = np.tile([0.0, -1.0, 0.0], (n, 1))
        streams = (np.uint64(core.make_stream(core.PURPOSE_MISC, 0))
                   + np.arange(n, dtype=np.uint64))
        rad = src.query(o, d, streams=streams).mean(axis=0)
        expect = np.array([0.62, 0.58, 0.54]) / np.pi * e_ref
        assert np.allclose(rad, expect, rtol=0.02)

    def test_deterministic_and_seed_sensitive(self):
        scene = scenes.build_study_scene()
        cam = scenes.study_cameras(count=2, width=16, height=16)[0]
        a = forward.path_trace(scene, cam, spp=4, seed=5)
        b = forward.path_trace(scene, cam, spp=4, seed=5)
        c = forward.path_trace(scene, cam, spp=4, seed=6)
        d = forward.path_trace(scene, cam, spp=4, seed=5, view_id=1)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)


class TestGtBuffers:
    def test_study_scene_products(self):
        scene = scenes.build_study_scene()
        cam = scenes.study_cameras(count=1, width=24, height=24)[0]
        bufs = forward.render_gt_buffers(scene, cam, vis_samples=16)
        surf = bufs["surface_mask"]
        assert surf.sum() > 100
        norms = np.linalg.norm(bufs["normal"][surf], axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-4)
        assert np.all(bufs["depth"][surf] > 0)
        floor = bufs["instances"] == 0
        assert np.any(floor)
        assert np.allclose(
            bufs["albedo"][floor],
            np.float32([0.62, 0.58, 0.54]), atol=1e-6,
        )

    def test_emitter_mask_and_shadow_labels(self):
        prims = [
            geometry.Primitive(shape="plane", params=[0, 1, 0, 0],
                               material_id=0),
            geometry.Primitive(shape="box", params=[1.5, 0.1, 1.5],
                               position=[0.0, 1.0, 0.0], material_id=0,
                               instance_id=1),
            geometry.Primitive(shape="sphere", params=[0.6],
                               position=[0.0, 3.0, 0.0], instance_id=2,
                               emission=[4.0, 4.0, 4.0]),
        ]
        mats = [geometry.Material(albedo=np.full(3, 0.3), specular=False)]
        scene = geometry.SdfScene(
            primitives=prims, materials=mats,
            bbox_lo=np.array([-6.0, -1.0, -6.0]),
            bbox_hi=np.array([6.0, 5.0, 6.0]),
        )
        cam = scenes.camera_from_fov(
            position=(3.5, 2.5, 3.5), target=(0.5, 0.0, 0.0),
            fov_deg=70.0, width=32, height=32,
        )
        bufs = forward.render_gt_buffers(scene, cam, vis_samples=64)
        floor = bufs["instances"] == 0
        assert np.any(bufs["emitter_mask"])
        assert np.all(bufs["visibility"][bufs["emitter_mask"]] == 0.0)
        # the slab shadows part of the visible floor but not all of it
        lab = bufs["shadow_binary"][floor]
        assert 0 < lab.sum() < lab.size


class TestRenderDecomposed:
    def test_constant_fields_reconstruct_diffuse(self):
        scene = scenes.build_ambient_plane_scene(
            albedo=(0.5, 0.5, 0.5), ambient=(0.8, 0.8, 0.8)
        )
        cam = scenes.plane_camera()
        fields = constant_fields(
            0.6, 0.9, np.pi, 1.0, scene.bbox_lo, scene.bbox_hi
        )
        bufs = forward.render_decomposed(
            scene, cam, fields, forward.RenderConfig(env_spp=2, spec_samples=8)
        )
        surface = bufs.instances >= 0
        assert np.allclose(bufs.diffuse[surface], 0.6, atol=1e-6)
        assert np.all(bufs.specular[surface] >= 0.0)
        assert np.allclose(bufs.albedo[surface], 0.6, atol=1e-7)
        assert np.allclose(bufs.roughness[surface], 0.9, atol=1e-7)
        assert np.allclose(bufs.shadow[surface], 1.0, atol=1e-7)

    def test_combined_is_sum_of_stored_buffers(self):
        scene = scenes.build_study_scene()
        cam = scenes.study_cameras(count=1, width=20, height=20)[0]
        fields = constant_fields(
            0.4, 0.5, 2.0, 0.7, scene.bbox_lo, scene.bbox_hi
        )
        bufs = forward.render_decomposed(
            scene, cam, fields, forward.RenderConfig(env_spp=1, spec_samples=4)
        )
        assert np.array_equal(bufs.combined, bufs.diffuse + bufs.specular)
        assert bufs.combined.dtype == np.float32

    def test_shadow_override_and_material_override(self):
        scene = scenes.build_study_scene()
        cam = scenes.study_cameras(count=1, width=16, height=16)[0]
        fields = constant_fields(
            0.4, 0.5, 2.0, 1.0, scene.bbox_lo, scene.bbox_hi
        )
        cfg = forward.RenderConfig(env_spp=1, spec_samples=4)
        override = np.full((16, 16), 0.25)
        bufs = forward.render_decomposed(
            scene, cam, fields, cfg, shadow_override=override
        )
        surface = bufs.instances >= 0
        surface &= ~(bufs.diffuse[..., 0] == 0)  # drop emitter/miss rows
        assert np.allclose(bufs.shadow[bufs.instances >= 0], 0.25)

        mask = np.ones((16, 16), dtype=bool)
        bufs2 = forward.render_decomposed(
            scene, cam, fields, cfg, material_override_mask=mask
        )
        floor = bufs2.instances == 0
        if np.any(floor):
            assert np.allclose(
                bufs2.albedo[floor], np.float32([0.62, 0.58, 0.54]), atol=1e-6
            )


class TestSceneEdits:
    def test_set_emission(self):
        scene = scenes.build_study_scene()
        panel = [p for p in scene.primitives if p.is_emitter][0]
        lit = forward.set_emission(scene, panel.instance_id, (24.0, 6.0, 6.0))
        new_panel = [p for p in lit.primitives if p.is_emitter][0]
        assert np.allclose(new_panel.emission, [24.0, 6.0, 6.0])
        # original untouched
        assert np.allclose(panel.emission, [12.0, 12.0, 12.0])
        with pytest.raises(ValueError):
            forward.set_emission(scene, 0, (1.0, 1.0, 1.0))  # floor, not emitter

    def test_replace_material_changes_render(self):
        scene = scenes.build_study_scene()
        cam = scenes.study_cameras(count=1, width=16, height=16)[0]
        before = forward.path_trace(scene, cam, spp=4, seed=0)
        sphere_inst = scene.primitives[7].instance_id
        edited = forward.replace_material(
            scene, sphere_inst,
            geometry.Material(albedo=np.array([0.05, 0.05, 0.9]),
                              roughness=0.1),
        )
        after = forward.path_trace(edited, cam, spp=4, seed=0)
        assert len(edited.materials) == len(scene.materials) + 1
        assert not np.array_equal(before, after)
        with pytest.raises(ValueError):
            forward.replace_material(
                scene, 99, geometry.Material(albedo=np.full(3, 0.5))
            )

    def test_insert_object_unions_new_instance(self):
        scene = scenes.build_study_scene()
        n_inst = scene.n_instances
        edited = forward.insert_object(
            scene,
            geometry.Primitive(shape="sphere", params=[0.2],
                               position=[0.0, 0.2, 0.6]),
            geometry.Material(albedo=np.full(3, 0.8), roughness=0.3),
        )
        assert edited.n_instances == n_inst + 1
        assert len(edited.primitives) == len(scene.primitives) + 1
        d, inst = geometry.sdf_eval(edited, np.array([0.0, 0.2, 0.6]))
        assert d == pytest.approx(-0.2, abs=1e-12)
        assert inst == n_inst
        # original scene has open space there
        d0, _ = geometry.sdf_eval(scene, np.array([0.0, 0.2, 0.6]))
        assert d0 > 0
