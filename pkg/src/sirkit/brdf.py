"""Microfacet BRDF: GGX distribution, Schlick Fresnel, Smith shadowing.

The model is a Lambertian diffuse lobe plus an achromatic Cook-Torrance
specular lobe with fixed dielectric F0 = 0.04.  alpha = roughness^2 and
the Smith k parameter is alpha^2 / 2.  Roughness lives in [0.01, 1];
the floor keeps the distribution finite.  All functions broadcast over
leading axes and also provide the exact partial derivative of the
specular lobe with respect to roughness for the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import build_onb, normalize

F0 = 0.04
ROUGHNESS_MIN = 0.01
ROUGHNESS_MAX = 1.0
_DENOM_FLOOR = 1e-4


def clamp_roughness(r):
    return np.clip(r, ROUGHNESS_MIN, ROUGHNESS_MAX)


def clamp_albedo(a):
    return np.clip(a, 0.0, 1.0)


@dataclass
class BrdfParams:
    albedo: np.ndarray  # rgb in [0,1]
    roughness: float

    def __post_init__(self):
        self.albedo = clamp_albedo(np.asarray(self.albedo, dtype=np.float64))
        self.roughness = float(clamp_roughness(self.roughness))

    @property
    def alpha(self) -> float:
        return self.roughness**2


def ggx_ndf(n_dot_h, roughness):
    """GGX normal distribution D(h)."""
    a = np.asarray(roughness, dtype=np.float64) ** 2
    c = np.asarray(n_dot_h, dtype=np.float64)
    t = c * c * (a * a - 1.0) + 1.0
    return a * a / (np.pi * t * t)


def fresnel_schlick(o_dot_h):
    """Schlick approximation with fixed F0 = 0.04."""
    m = 1.0 - np.asarray(o_dot_h, dtype=np.float64)
    return F0 + (1.0 - F0) * m**5


def _smith_g1(c, k):
    return c / (c * (1.0 - k) + k)


def smith_g(n_dot_o, n_dot_i, roughness):
    """Smith geometric term G1(n.o) G1(n.i) with k = alpha^2 / 2."""
    a = np.asarray(roughness, dtype=np.float64) ** 2
    k = a * a / 2.0
    return _smith_g1(np.asarray(n_dot_o, float), k) * _smith_g1(
        np.asarray(n_dot_i, float), k
    )


def _dots(n, wi, wo):
    n = np.asarray(n, dtype=np.float64)
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    n_i = np.sum(n * wi, axis=-1)
    n_o = np.sum(n * wo, axis=-1)
    s = wi + wo
    h = normalize(s)
    n_h = np.clip(np.sum(n * h, axis=-1), 0.0, 1.0)
    # h bisects wi and wo, so o.h = i.h = |wi+wo| / 2; this form is
    # bit-identical under a wi/wo swap, keeping reciprocity exact
    o_h = np.clip(0.5 * np.linalg.norm(s, axis=-1), 0.0, 1.0)
    return n_i, n_o, n_h, o_h


def eval_specular(n, wi, wo, roughness):
    """Cook-Torrance specular value; zero for back-facing directions."""
    n_i, n_o, n_h, o_h = _dots(n, wi, wo)
    above = (n_i > 0.0) & (n_o > 0.0)
    d = ggx_ndf(n_h, roughness)
    f = fresnel_schlick(o_h)
    g = smith_g(np.maximum(n_o, 1e-12), np.maximum(n_i, 1e-12), roughness)
    denom = np.maximum(4.0 * n_o * n_i, _DENOM_FLOOR)
    return np.where(above, d * f * g / denom, 0.0)


def eval_brdf(albedo, roughness, n, wi, wo):
    """Full BRDF value: albedo/pi plus the achromatic specular lobe."""
    albedo = clamp_albedo(np.asarray(albedo, dtype=np.float64))
    spec = eval_specular(n, wi, wo, roughness)
    n_i = np.sum(np.asarray(n, float) * np.asarray(wi, float), axis=-1)
    n_o = np.sum(np.asarray(n, float) * np.asarray(wo, float), axis=-1)
    above = (n_i > 0.0) & (n_o > 0.0)
    diff = albedo / np.pi
    out = diff * np.asarray(above, dtype=np.float64)[..., None]
    return out + spec[..., None]


def d_specular_d_roughness(n, wi, wo, roughness):
    """Exact d eval_specular / d roughness via the chain rule.

    F does not depend on roughness; D depends through alpha = r^2 and
    G through k = alpha^2 / 2 = r^4 / 2.
    """
    r = np.asarray(roughness, dtype=np.float64)
    n_i, n_o, n_h, o_h = _dots(n, wi, wo)
    above = (n_i > 0.0) & (n_o > 0.0)
    n_i = np.maximum(n_i, 1e-12)
    n_o = np.maximum(n_o, 1e-12)

    a = r * r
    c2 = n_h * n_h
    t = c2 * (a * a - 1.0) + 1.0
    d_val = a * a / (np.pi * t * t)
    dd_da = (2.0 * a / (np.pi * t**3)) * (t - 2.0 * a * a * c2)
    dd_dr = dd_da * 2.0 * r

    k = a * a / 2.0
    dk_dr = 2.0 * r**3
    g1o = _smith_g1(n_o, k)
    g1i = _smith_g1(n_i, k)
    dg1o_dk = -n_o * (1.0 - n_o) / (n_o + k * (1.0 - n_o)) ** 2
    dg1i_dk = -n_i * (1.0 - n_i) / (n_i + k * (1.0 - n_i)) ** 2
    dg_dr = (dg1o_dk * g1i + g1o * dg1i_dk) * dk_dr

    f = fresnel_schlick(o_h)
    denom = np.maximum(4.0 * n_o * n_i, _DENOM_FLOOR)
    deriv = f * (dd_dr * g1o * g1i + d_val * dg_dr) / denom
    return np.where(above, deriv, 0.0)


def sample_ggx(n, wo, roughness, u):
    """Importance-sample the GGX lobe; returns (wi, pdf, valid).

    Invalid samples (reflected below the horizon) are flagged rather
    than resampled so estimators keep a fixed, deterministic count.
    """
    n = np.asarray(n, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(roughness, dtype=np.float64) ** 2
    u1, u2 = u[..., 0], u[..., 1]
    cos_h = np.sqrt(np.clip((1.0 - u1) / (1.0 + (a * a - 1.0) * u1), 0.0, 1.0))
    sin_h = np.sqrt(np.maximum(0.0, 1.0 - cos_h * cos_h))
    phi = 2.0 * np.pi * u2
    t, bt = build_onb(n)
    h = (
        (sin_h * np.cos(phi))[..., None] * t
        + (sin_h * np.sin(phi))[..., None] * bt
        + cos_h[..., None] * n
    )
    o_h = np.sum(wo * h, axis=-1)
    wi = 2.0 * o_h[..., None] * h - wo
    n_i = np.sum(n * wi, axis=-1)
    valid = (n_i > 0.0) & (o_h > 1e-9)
    d = ggx_ndf(np.clip(cos_h, 0.0, 1.0), roughness)
    pdf = d * cos_h / np.maximum(4.0 * np.abs(o_h), 1e-12)
    return wi, pdf, valid
