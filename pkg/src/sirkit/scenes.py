"""Scene construction, serialization, and reference scene builders.

Scene files are JSON with format tag "sir-scene-1":

    {
      "format": "sir-scene-1",
      "bbox": {"lo": [x,y,z], "hi": [x,y,z]},
      "ambient": [r,g,b],
      "materials": [{"albedo": [r,g,b], "roughness": 0.4, "specular": true}],
      "primitives": [{"shape": "sphere", "params": [0.5],
                      "position": [..], "rotation": [[..]x3] (optional),
                      "scale": 1.0, "instance": 0, "material": 0,
                      "emission": [0,0,0]}],
      "csg": [["prim", 0], ["prim", 1], ["union"]],   // optional
      "cameras": [{...}]                              // optional
    }
"""

from __future__ import annotations

import json

import numpy as np

from .geometry import Material, Primitive, SdfScene
from .imaging import Camera

FORMAT_TAG = "sir-scene-1"


# ------------------------------------------------------------- cameras


def look_at(position, target, up=(0.0, 1.0, 0.0)):
    """Camera rotation with +z toward the target and image y downward."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-8:
        r = np.cross(f, np.array([1.0, 0.0, 0.0]))
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    return np.stack([r, d, f], axis=1)


def camera_from_fov(position, target, fov_deg, width, height, up=(0, 1, 0)):
    fx = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    return Camera(
        fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
        rotation=look_at(position, target, up),
        position=np.asarray(position, dtype=np.float64),
        width=width, height=height,
    )


def orbit_cameras(count, center, radius, height, target, fov_deg,
                  width, height_px, phase=0.35):
    """Cameras on a horizontal ring, evenly spaced in azimuth."""
    cams = []
    for i in range(count):
        a = phase + 2.0 * np.pi * i / count
        pos = np.array(
            [center[0] + radius * np.sin(a), height,
             center[2] + radius * np.cos(a)]
        )
        cams.append(camera_from_fov(pos, target, fov_deg, width, height_px))
    return cams


# ------------------------------------------------------- serialization


def scene_to_dict(scene: SdfScene, cameras=None) -> dict:
    prims = []
    for p in scene.primitives:
        entry = {
            "shape": p.shape,
            "params": p.params.tolist(),
            "instance": p.instance_id,
            "material": p.material_id,
        }
        if p.shape != "plane":
            entry["position"] = p.position.tolist()
            if not np.allclose(p.rotation, np.eye(3)):
                entry["rotation"] = p.rotation.tolist()
            if p.scale != 1.0:
                entry["scale"] = p.scale
        if p.is_emitter:
            entry["emission"] = p.emission.tolist()
        prims.append(entry)
    out = {
        "format": FORMAT_TAG,
        "bbox": {"lo": scene.bbox_lo.tolist(), "hi": scene.bbox_hi.tolist()},
        "ambient": scene.ambient.tolist(),
        "materials": [
            {
                "albedo": m.albedo.tolist(),
                "roughness": m.roughness,
                "specular": m.specular,
            }
            for m in scene.materials
        ],
        "primitives": prims,
    }
    default = [["prim", 0]] + [
        x for i in range(1, len(scene.primitives)) for x in (["prim", i], ["union"])
    ]
    as_lists = [list(node) for node in scene.csg]
    if as_lists != default:
        out["csg"] = as_lists
    if cameras:
        out["cameras"] = [c.to_dict() for c in cameras]
    return out


def scene_from_dict(data: dict):
    """Returns (scene, cameras); cameras may be an empty list."""
    if data.get("format") != FORMAT_TAG:
        raise ValueError(
            f"unsupported scene format {data.get('format')!r}; "
            f"expected {FORMAT_TAG!r}"
        )
    materials = [
        Material(
            albedo=np.array(m["albedo"], dtype=np.float64),
            roughness=m.get("roughness", 0.5),
            specular=m.get("specular", True),
        )
        for m in data["materials"]
    ]
    prims = []
    for i, entry in enumerate(data["primitives"]):
        prims.append(
            Primitive(
                shape=entry["shape"],
                params=np.array(entry["params"], dtype=np.float64),
                position=np.array(entry.get("position", [0, 0, 0]), float),
                rotation=np.array(entry.get("rotation", np.eye(3).tolist()), float),
                scale=entry.get("scale", 1.0),
                instance_id=entry.get("instance", i),
                material_id=entry.get("material", 0),
                emission=np.array(entry.get("emission", [0, 0, 0]), float),
            )
        )
    csg = None
    if "csg" in data:
        csg = [tuple(node) for node in data["csg"]]
    scene = SdfScene(
        primitives=prims,
        materials=materials,
        bbox_lo=np.array(data["bbox"]["lo"], float),
        bbox_hi=np.array(data["bbox"]["hi"], float),
        csg=csg,
        ambient=np.array(data.get("ambient", [0, 0, 0]), float),
    )
    cameras = [Camera.from_dict(c) for c in data.get("cameras", [])]
    return scene, cameras


def save_scene(path, scene: SdfScene, cameras=None):
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene, cameras), f, indent=1)


def load_scene(path):
    with open(path) as f:
        return scene_from_dict(json.load(f))


# ---------------------------------------------------- reference scenes


def _rot_y(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def build_study_scene():
    """Closed room with a tall box, a sphere, and a ceiling panel light.

    The standard multi-view reconstruction target: distinct per-wall
    albedos, glossy objects, one bright area emitter offset from the
    room axis so shadows land asymmetrically.
    """
    w, h, d = 4.0, 3.0, 3.0
    plane_specs = [
        ([0.0, 1.0, 0.0], 0.0, 0),    # floor
        ([0.0, -1.0, 0.0], -h, 1),    # ceiling
        ([1.0, 0.0, 0.0], -w / 2, 2),  # left wall
        ([-1.0, 0.0, 0.0], -w / 2, 3),  # right wall
        ([0.0, 0.0, 1.0], -d / 2, 4),  # back wall
        ([0.0, 0.0, -1.0], -d / 2, 5),  # front wall
    ]
    materials = [
        Material(albedo=[0.62, 0.58, 0.54], roughness=0.45),
        Material(albedo=[0.70, 0.70, 0.68], roughness=0.65),
        Material(albedo=[0.70, 0.18, 0.15], roughness=0.55),
        Material(albedo=[0.15, 0.55, 0.18], roughness=0.55),
        Material(albedo=[0.60, 0.60, 0.65], roughness=0.60),
        Material(albedo=[0.55, 0.55, 0.50], roughness=0.60),
        Material(albedo=[0.25, 0.30, 0.60], roughness=0.30),
        Material(albedo=[0.75, 0.55, 0.20], roughness=0.25),
    ]
    prims = [
        Primitive(shape="plane", params=[*n, off], material_id=m)
        for n, off, m in plane_specs
    ]
    prims.append(
        Primitive(
            shape="box", params=[0.35, 0.65, 0.35],
            position=[-0.7, 0.65, -0.35], rotation=_rot_y(20.0),
            material_id=6,
        )
    )
    prims.append(
        Primitive(
            shape="sphere", params=[0.45], position=[0.75, 0.45, 0.35],
            material_id=7,
        )
    )
    prims.append(
        Primitive(
            shape="box", params=[0.5, 0.02, 0.4],
            position=[0.3, 2.93, 0.0],
            emission=[12.0, 12.0, 12.0],
        )
    )
    scene = SdfScene(
        primitives=prims,
        materials=materials,
        bbox_lo=np.array([-w / 2, 0.0, -d / 2]),
        bbox_hi=np.array([w / 2, h, d / 2]),
    )
    return scene


def study_cameras(count=9, width=128, height=128):
    return orbit_cameras(
        count=count, center=(0.0, 0.0, 0.0), radius=1.25, height=1.7,
        target=(0.0, 0.7, 0.0), fov_deg=72.0, width=width, height_px=height,
    )


def build_furnace_scene(emission=1.0, albedo=1.0, roughness=1.0,
                        specular=True, shell_inner=2.0, shell_outer=2.2,
                        object_radius=0.5):
    """Uniformly emitting spherical shell around a single test sphere.

    With unit albedo the object should disappear against the emitter:
    any energy gain or loss in the reflection model shows up directly.
    """
    prims = [
        Primitive(shape="sphere", params=[shell_outer]),
        Primitive(shape="sphere", params=[shell_inner],
                  emission=[emission, emission, emission]),
        Primitive(shape="sphere", params=[object_radius], material_id=0),
    ]
    csg = [("prim", 0), ("prim", 1), ("subtract",), ("prim", 2), ("union",)]
    scene = SdfScene(
        primitives=prims,
        materials=[Material(albedo=np.full(3, float(albedo)),
                            roughness=roughness, specular=specular)],
        bbox_lo=np.full(3, -shell_outer),
        bbox_hi=np.full(3, shell_outer),
        csg=csg,
    )
    return scene


def furnace_camera(width=64, height=64, distance=1.3, fov_deg=50.0):
    return camera_from_fov(
        position=(0.0, 0.0, -distance), target=(0.0, 0.0, 0.0),
        fov_deg=fov_deg, width=width, height=height,
    )


def build_ambient_plane_scene(albedo=(0.5, 0.5, 0.5), ambient=(1.0, 1.0, 1.0)):
    """An unlit diffuse floor under a constant environment.

    Diffuse-only transport makes every on-plane pixel exactly
    albedo * ambient with zero variance, which pins the estimator's
    normalization.
    """
    scene = SdfScene(
        primitives=[
            Primitive(shape="plane", params=[0.0, 1.0, 0.0, 0.0], material_id=0)
        ],
        materials=[Material(albedo=np.asarray(albedo, float),
                            roughness=0.5, specular=False)],
        bbox_lo=np.array([-2.0, -1.0, -2.0]),
        bbox_hi=np.array([2.0, 1.0, 2.0]),
        ambient=np.asarray(ambient, dtype=np.float64),
    )
    return scene


def plane_camera(width=48, height=48):
    return camera_from_fov(
        position=(0.0, 1.0, 0.0), target=(0.4, 0.0, 0.4),
        fov_deg=60.0, width=width, height=height,
    )
