"""Analytic SDF scenes: primitives, CSG composition, sphere tracing.

A scene is a list of transformed primitives combined by an explicit
CSG program (postfix; default is the union of all primitives).  Every
query reports the contributing primitive so hits carry instance and
material ids, and signs are tracked through subtraction so carved
surfaces get correctly oriented normals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

SHAPE_CODES = {
    "sphere": K.SPHERE,
    "box": K.BOX,
    "plane": K.PLANE,
    "rounded_box": K.ROUNDED_BOX,
}
OP_CODES = {
    "prim": K.OP_PRIM,
    "union": K.OP_UNION,
    "subtract": K.OP_SUBTRACT,
    "intersect": K.OP_INTERSECT,
}
PARAM_COUNTS = {"sphere": 1, "box": 3, "plane": 4, "rounded_box": 4}


@dataclass
class Material:
    albedo: np.ndarray
    roughness: float = 0.5
    specular: bool = True

    def __post_init__(self):
        self.albedo = np.clip(np.asarray(self.albedo, dtype=np.float64), 0.0, 1.0)
        if self.albedo.shape != (3,):
            raise ValueError("albedo must be rgb")
        self.roughness = float(np.clip(self.roughness, 0.01, 1.0))


@dataclass
class Primitive:
    """One analytic solid under a rigid transform plus uniform scale.

    shape params: sphere (radius,), box (hx, hy, hz),
    rounded_box (hx, hy, hz, corner radius),
    plane (nx, ny, nz, offset) as the world half-space n.x <= offset
    (the transform fields are ignored for planes).
    """

    shape: str
    params: np.ndarray
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scale: float = 1.0
    instance_id: int = -1  # defaults to the primitive index
    material_id: int = 0
    emission: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.shape not in SHAPE_CODES:
            raise ValueError(f"unknown shape {self.shape!r}")
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.shape[0] != PARAM_COUNTS[self.shape]:
            raise ValueError(
                f"{self.shape} expects {PARAM_COUNTS[self.shape]} params, "
                f"got {self.params.shape[0]}"
            )
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal")
        self.scale = float(self.scale)
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")
        self.emission = np.asarray(self.emission, dtype=np.float64).reshape(3)
        if self.shape == "plane":
            n = self.params[:3]
            norm = np.linalg.norm(n)
            if norm < 1e-12:
                raise ValueError("plane normal is degenerate")
            self.params = np.array([*(n / norm), self.params[3] / norm])
            if self.is_emitter:
                raise ValueError("plane primitives cannot emit")

    @property
    def is_emitter(self) -> bool:
        return bool(np.any(self.emission > 0.0))


@dataclass
class TraceStats:
    """Mutable per-scene diagnostics; not part of scene identity."""

    budget_exhausted: int = 0


@dataclass
class Hit:
    t: float
    point: np.ndarray
    normal: np.ndarray
    prim_index: int
    instance_id: int
    material_id: int
    is_emitter: bool


@dataclass
class SdfScene:
    primitives: list
    materials: list
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray
    csg: list | None = None  # postfix ("prim", i) / ("union",) / ...
    ambient: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stats: TraceStats = field(default_factory=TraceStats)

    def __post_init__(self):
        self.bbox_lo = np.asarray(self.bbox_lo, dtype=np.float64).reshape(3)
        self.bbox_hi = np.asarray(self.bbox_hi, dtype=np.float64).reshape(3)
        if np.any(self.bbox_hi <= self.bbox_lo):
            raise ValueError("bbox_hi must exceed bbox_lo")
        self.ambient = np.asarray(self.ambient, dtype=np.float64).reshape(3)
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        if not self.materials:
            self.materials = [Material(albedo=np.full(3, 0.5))]
        for i, p in enumerate(self.primitives):
            if p.instance_id < 0:
                p.instance_id = i
            if not p.is_emitter and not (0 <= p.material_id < len(self.materials)):
                raise ValueError(f"primitive {i} has invalid material id")
        if self.csg is None:
            self.csg = default_union_csg(len(self.primitives))
        _validate_csg(self.csg, len(self.primitives))
        self._pack = None

    @property
    def scene_scale(self) -> float:
        return float(np.linalg.norm(self.bbox_hi - self.bbox_lo))

    @property
    def eps(self) -> float:
        return 1e-4 * self.scene_scale

    @property
    def n_instances(self) -> int:
        return max(p.instance_id for p in self.primitives) + 1

    @property
    def emitter_prims(self) -> list:
        return [i for i, p in enumerate(self.primitives) if p.is_emitter]

    def pack(self) -> K.ScenePack:
        if self._pack is None:
            self._pack = build_pack(self)
        return self._pack

    def invalidate(self):
        self._pack = None


def default_union_csg(n_prims: int) -> list:
    prog = [("prim", 0)]
    for i in range(1, n_prims):
        prog.append(("prim", i))
        prog.append(("union",))
    return prog


def _validate_csg(prog, n_prims):
    depth = 0
    for node in prog:
        op = node[0]
        if op == "prim":
            if not (0 <= node[1] < n_prims):
                raise ValueError(f"csg references primitive {node[1]}")
            depth += 1
            if depth > K.MAX_STACK:
                raise ValueError("csg program exceeds stack depth")
        elif op in ("union", "subtract", "intersect"):
            if depth < 2:
                raise ValueError("csg operator underflows the stack")
            depth -= 1
        else:
            raise ValueError(f"unknown csg op {op!r}")
    if depth != 1:
        raise ValueError("csg program must leave exactly one solid")


def build_pack(scene: SdfScene) -> K.ScenePack:
    prims = scene.primitives
    n = len(prims)
    prim_type = np.empty(n, dtype=np.int32)
    prim_rot = np.empty((n, 3, 3), dtype=np.float64)
    prim_pos = np.empty((n, 3), dtype=np.float64)
    prim_scale = np.empty(n, dtype=np.float64)
    prim_params = np.zeros((n, 4), dtype=np.float64)
    prim_instance = np.empty(n, dtype=np.int32)
    prim_material = np.empty(n, dtype=np.int32)
    prim_emission = np.zeros((n, 3), dtype=np.float64)
    prim_emissive = np.zeros(n, dtype=np.uint8)
    for i, p in enumerate(prims):
        prim_type[i] = SHAPE_CODES[p.shape]
        prim_rot[i] = p.rotation.T  # store world-to-local
        prim_pos[i] = p.position
        prim_scale[i] = p.scale
        prim_params[i, : p.params.shape[0]] = p.params
        prim_instance[i] = p.instance_id
        prim_material[i] = max(p.material_id, 0)
        prim_emission[i] = p.emission
        prim_emissive[i] = 1 if p.is_emitter else 0
    ops = np.empty(len(scene.csg), dtype=np.int32)
    args = np.full(len(scene.csg), -1, dtype=np.int32)
    for c, node in enumerate(scene.csg):
        ops[c] = OP_CODES[node[0]]
        if node[0] == "prim":
            args[c] = node[1]
    mats = scene.materials
    mat_albedo = np.stack([m.albedo for m in mats]).astype(np.float64)
    mat_rough = np.array([m.roughness for m in mats], dtype=np.float64)
    mat_specular = np.array([1 if m.specular else 0 for m in mats], dtype=np.uint8)
    emitters = np.array(scene.emitter_prims, dtype=np.int32)
    return K.ScenePack(
        prim_type, prim_rot, prim_pos, prim_scale, prim_params,
        prim_instance, prim_material, prim_emission, prim_emissive,
        ops, args, mat_albedo, mat_rough, mat_specular, emitters,
        scene.bbox_lo.copy(), scene.bbox_hi.copy(),
        scene.ambient.copy(), scene.eps, scene.scene_scale,
    )


def sdf_eval(scene: SdfScene, points):
    """Signed distance and nearest contributing instance id.

    Accepts one point (3,) or a batch (n, 3); ties at equal distance
    resolve to the lower instance id.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d, inst = K.sdf_eval_batch(scene.pack(), np.ascontiguousarray(pts))
    if np.asarray(points).ndim == 1:
        return float(d[0]), int(inst[0])
    return d, inst


def sdf_normal(scene: SdfScene, points):
    """Central-difference surface normal(s); h = 1e-4 * scene scale.

    Raises on a vanishing gradient, which signals degenerate geometry
    (for example a point equidistant inside a symmetric solid).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    h = 1e-4 * scene.scene_scale
    n, mag = K.sdf_normal_batch(scene.pack(), np.ascontiguousarray(pts), h)
    if np.any(mag < 1e-8):
        bad = int(np.argmax(mag < 1e-8))
        raise ValueError(
            f"sdf gradient vanishes at point {pts[bad]!r}; geometry is "
            "degenerate there"
        )
    if np.asarray(points).ndim == 1:
        return n[0]
    return n


def sphere_trace(scene: SdfScene, origin, direction, t_max=None):
    """March one ray to the first surface; None on a miss.

    Steps by the distance bound with a fixed iteration budget; budget
    exhaustion counts as a miss and increments scene.stats.
    """
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    tm = float(t_max) if t_max is not None else 4.0 * scene.scene_scale
    ts, prim, sgn, exhausted = K.trace_batch(
        scene.pack(), np.ascontiguousarray(o), np.ascontiguousarray(d), tm
    )
    scene.stats.budget_exhausted += int(exhausted.sum())
    if prim[0] < 0:
        return None
    point = o[0] + ts[0] * d[0]
    normal = K.hit_normal_batch(scene.pack(), prim, sgn, point[None, :], d)[0]
    p = scene.primitives[int(prim[0])]
    return Hit(
        t=float(ts[0]),
        point=point,
        normal=normal,
        prim_index=int(prim[0]),
        instance_id=p.instance_id,
        material_id=p.material_id,
        is_emitter=p.is_emitter,
    )


def trace_rays(scene: SdfScene, origins, dirs, t_max=None):
    """Batch sphere trace; returns (t, prim, instance, points, normals).

    prim < 0 marks misses; their points/normals are zero-filled.
    """
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(d / np.linalg.norm(d, axis=-1, keepdims=True))
    tm = float(t_max) if t_max is not None else 4.0 * scene.scene_scale
    ts, prim, sgn, exhausted = K.trace_batch(scene.pack(), o, d, tm)
    scene.stats.budget_exhausted += int(exhausted.sum())
    pts = o + ts[:, None] * d
    normals = np.zeros_like(pts)
    hit = prim >= 0
    if np.any(hit):
        normals[hit] = K.hit_normal_batch(
            scene.pack(), prim[hit], sgn[hit],
            np.ascontiguousarray(pts[hit]), np.ascontiguousarray(d[hit]),
        )
    pts[~hit] = 0.0
    inst = np.where(hit, scene.pack().prim_instance[np.maximum(prim, 0)], -1)
    return ts, prim, inst.astype(np.int32), pts, normals
