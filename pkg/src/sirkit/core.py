"""Deterministic sampling primitives and small color-space helpers.

The random number generator is counter based: every draw is a pure
function of (seed, stream, index), so results never depend on call
order or thread scheduling.  Streams partition the index space by
purpose (camera paths, irradiance probes, ...) and by point/pixel id.
"""

from __future__ import annotations

import numpy as np

_PHI = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53

# Stream purposes.  A stream id is (purpose << 56) | entity index, so an
# entity (pixel, surface point, iteration) owns its own sample sequence.
PURPOSE_CAMERA = 0
PURPOSE_IRRADIANCE = 1
PURPOSE_SHADOW = 2
PURPOSE_SPECULAR = 3
PURPOSE_FIT = 4
PURPOSE_ENVMAP = 5
PURPOSE_GT_SHADOW = 6
PURPOSE_MISC = 7


def make_stream(purpose: int, entity: int) -> int:
    """Combine a purpose tag and an entity index into a stream id."""
    return (int(purpose) << 56) | int(entity)


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arrays wrap on overflow without
    # raising, unlike uint64 scalars under strict warning filters.
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def rng_u01(seed: int, stream: int, index) -> np.ndarray | float:
    """Uniform draw(s) in [0,1) at the given counter position(s).

    `index` may be a scalar or integer array; the result has the same
    shape.  Identical arguments give identical output on any platform.
    """
    idx = np.asarray(index, dtype=np.uint64)
    scalar = idx.ndim == 0
    idx = np.atleast_1d(idx)
    h = _mix64(np.full(idx.shape, np.uint64(seed) + _PHI, dtype=np.uint64))
    h = _mix64(h ^ np.uint64(stream))
    h = _mix64(h ^ idx)
    u = (h >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return float(u[0]) if scalar else u


def rng_block(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """`count` consecutive uniforms starting at counter `start`."""
    return rng_u01(seed, stream, np.arange(start, start + count, dtype=np.uint64))


def normalize(v: np.ndarray) -> np.ndarray:
    """Normalize vectors along the last axis."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, 1e-300)


def build_onb(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangent/bitangent for unit normal(s) `n`.

    Branchless construction (Duff et al.); stable for every direction
    including the poles, and bit-reproducible across platforms.
    """
    n = np.asarray(n, dtype=np.float64)
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    s = np.copysign(1.0, nz)
    a = -1.0 / (s + nz)
    b = nx * ny * a
    t = np.stack([1.0 + s * nx * nx * a, s * b, -s * nx], axis=-1)
    bt = np.stack([b, s + ny * ny * a, -ny], axis=-1)
    return t, bt


def _to_world(n, t, bt, local):
    return (
        local[..., 0:1] * t + local[..., 1:2] * bt + local[..., 2:3] * np.asarray(n)
    )


def sample_hemisphere_uniform(n: np.ndarray, u: np.ndarray):
    """Uniform hemisphere sample(s) about `n`; returns (dir, pdf).

    Mapping: cos(theta) = u1, phi = 2 pi u2 in the local frame of n.
    pdf is the constant 1/(2 pi).
    """
    n = np.asarray(n, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    cos_t = np.clip(u[..., 0], 0.0, 1.0)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * np.pi * u[..., 1]
    local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)
    t, bt = build_onb(n)
    d = _to_world(n, t, bt, local)
    pdf = np.full(u.shape[:-1], 1.0 / (2.0 * np.pi))
    if d.ndim == 1:
        return d, float(pdf)
    return d, pdf


def concentric_disk(u: np.ndarray) -> np.ndarray:
    """Map [0,1)^2 to the unit disk with the concentric (Shirley) map."""
    u = np.asarray(u, dtype=np.float64)
    a = 2.0 * u[..., 0] - 1.0
    b = 2.0 * u[..., 1] - 1.0
    use_a = np.abs(a) > np.abs(b)
    # Avoid 0/0 at the origin; r is 0 there so phi is irrelevant.
    safe_a = np.where(a == 0.0, 1.0, a)
    safe_b = np.where(b == 0.0, 1.0, b)
    r = np.where(use_a, a, b)
    phi = np.where(
        use_a,
        (np.pi / 4.0) * (b / safe_a),
        (np.pi / 2.0) - (np.pi / 4.0) * (a / safe_b),
    )
    phi = np.where((a == 0.0) & (b == 0.0), 0.0, phi)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)


def sample_hemisphere_cosine(n: np.ndarray, u: np.ndarray):
    """Cosine-weighted hemisphere sample(s) about `n`; returns (dir, pdf).

    Concentric-disk point lifted onto the hemisphere; pdf = cos/pi.
    """
    n = np.asarray(n, dtype=np.float64)
    d2 = concentric_disk(u)
    z = np.sqrt(np.maximum(0.0, 1.0 - np.sum(d2 * d2, axis=-1)))
    local = np.concatenate([d2, z[..., None]], axis=-1)
    t, bt = build_onb(n)
    d = _to_world(n, t, bt, local)
    pdf = z / np.pi
    if d.ndim == 1:
        return d, float(pdf)
    return d, pdf


def rgb_value(c: np.ndarray) -> np.ndarray | float:
    """HSV value channel: max(R, G, B) along the last axis."""
    c = np.asarray(c, dtype=np.float64)
    v = np.max(c, axis=-1)
    return float(v) if v.ndim == 0 else v


def replace_value(c: np.ndarray, v_new) -> np.ndarray:
    """Rescale rgb so its value channel becomes `v_new`, keeping hue.

    Black (value below 1e-6) has no hue and maps to gray (v_new,)*3.
    """
    c = np.asarray(c, dtype=np.float64)
    v_new = np.asarray(v_new, dtype=np.float64)
    v = np.max(c, axis=-1, keepdims=True)
    scaled = c * (v_new[..., None] / np.where(v > 1e-6, v, 1.0))
    gray = np.broadcast_to(v_new[..., None], c.shape)
    return np.where(v > 1e-6, scaled, gray)


def tonemap_preview(hdr: np.ndarray) -> np.ndarray:
    """Clamp to [0,1], gamma 2.2, quantize to 8 bits."""
    ldr = np.clip(np.asarray(hdr, dtype=np.float64), 0.0, 1.0) ** (1.0 / 2.2)
    return np.rint(ldr * 255.0).astype(np.uint8)


def tonemap_metric(hdr: np.ndarray) -> np.ndarray:
    """Float LDR copy (clamp + gamma 2.2) used before image metrics."""
    return np.clip(np.asarray(hdr, dtype=np.float64), 0.0, 1.0) ** (1.0 / 2.2)
