"""HDR image containers, pinhole camera, PFM/PNG I/O, and image metrics.

PFM stores rows bottom-up; readers accept both endiannesses via the
scale sign, writers always emit little endian.  PSNR/SSIM expect inputs
already mapped to [0,1]; callers tonemap HDR data first (gamma 2.2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import normalize, tonemap_preview

BACKGROUND_ID = -1
_MASK_BACKGROUND_PNG = 255


@dataclass
class HdrImage:
    data: np.ndarray  # (h, w, 3) float32, linear radiance

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("HdrImage data must be (h, w, 3)")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3) camera-to-world, +z forward
    position: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation not orthonormal (err {err:.2e})")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "position": self.position.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            d["fx"], d["fy"], d["cx"], d["cy"],
            np.array(d["rotation"]), np.array(d["position"]),
            d["width"], d["height"],
        )


def generate_ray(cam: Camera, px, py, jitter=(0.5, 0.5)):
    """World ray through pixel (px, py) at the given subpixel offset."""
    x = (np.asarray(px, float) + jitter[0] - cam.cx) / cam.fx
    y = (np.asarray(py, float) + jitter[1] - cam.cy) / cam.fy
    d_cam = np.stack(np.broadcast_arrays(x, y, np.ones_like(x)), axis=-1)
    d = normalize(d_cam @ cam.rotation.T)
    return cam.position, d


@dataclass
class InstanceMask:
    ids: np.ndarray  # (h, w) int32, BACKGROUND_ID where no surface

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int32)


class PfmParseError(ValueError):
    pass


def write_pfm(path, data: np.ndarray):
    """Write float32 PFM; 3 channels as 'PF', 1 channel as 'Pf'."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 3:
        magic = "PF"
    elif arr.shape[2] == 1:
        magic = "Pf"
    else:
        raise ValueError("PFM supports 1 or 3 channels")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file; returns (h, w, 3) or (h, w, 1) float32."""
    with open(path, "rb") as f:
        raw = f.read()

    def fail(msg, offset):
        raise PfmParseError(f"{path}: {msg} at byte {offset}")

    # header: magic, dimensions, scale, each terminated by one whitespace
    pos = 0
    tokens = []
    while len(tokens) < 4 and pos < len(raw):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            fail("truncated header", pos)
        tokens.append((raw[start:pos], start))
    if len(tokens) < 4:
        fail("truncated header", pos)
    magic = tokens[0][0]
    if magic not in (b"PF", b"Pf"):
        fail(f"bad magic {magic!r}", tokens[0][1])
    try:
        w = int(tokens[1][0])
        h = int(tokens[2][0])
        scale = float(tokens[3][0])
    except ValueError:
        fail("malformed header field", tokens[1][1])
    if w <= 0 or h <= 0 or scale == 0.0:
        fail("invalid header values", tokens[1][1])
    pos += 1  # single whitespace after the scale line
    nc = 3 if magic == b"PF" else 1
    need = w * h * nc * 4
    payload = raw[pos : pos + need]
    if len(payload) < need:
        fail(f"payload needs {need} bytes, found {len(payload)}", pos + len(payload))
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(payload, dtype=dtype).reshape(h, w, nc)
    return np.flipud(img).astype(np.float32)


def write_image_pfm(path, img: HdrImage):
    write_pfm(path, img.data)


def read_image_pfm(path) -> HdrImage:
    arr = read_pfm(path)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return HdrImage(arr)


def write_png(path, rgb8: np.ndarray):
    Image.fromarray(rgb8).save(path)


def write_preview_png(path, hdr: np.ndarray):
    write_png(path, tonemap_preview(hdr))


def write_mask_png(path, mask: InstanceMask):
    """Instance ids in the red channel; background stored as 255."""
    ids = mask.ids
    red = np.where(ids == BACKGROUND_ID, _MASK_BACKGROUND_PNG, ids)
    out = np.zeros(ids.shape + (3,), dtype=np.uint8)
    out[..., 0] = red.astype(np.uint8)
    write_png(path, out)


def read_mask_png(path) -> InstanceMask:
    arr = np.asarray(Image.open(path))
    red = arr[..., 0].astype(np.int32)
    ids = np.where(red == _MASK_BACKGROUND_PNG, BACKGROUND_ID, red)
    return InstanceMask(ids)


def _check_dims(a, b):
    da = a.data if isinstance(a, HdrImage) else np.asarray(a)
    db = b.data if isinstance(b, HdrImage) else np.asarray(b)
    if da.shape != db.shape:
        raise ValueError(f"dimension mismatch: {da.shape} vs {db.shape}")
    return np.asarray(da, dtype=np.float64), np.asarray(db, dtype=np.float64)


def mse(a, b) -> float:
    da, db = _check_dims(a, b)
    return float(np.mean((da - db) ** 2))


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for [0,1] inputs; +inf for identical images."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def ssim(a, b) -> float:
    """Mean SSIM over channels; 11x11 Gaussian window, sigma 1.5."""
    da, db = _check_dims(a, b)
    if da.ndim == 2:
        da, db = da[:, :, None], db[:, :, None]
    c1, c2 = 0.01**2, 0.03**2
    sigma, truncate = 1.5, 5.0 / 1.5  # radius 5 -> 11 taps
    vals = []
    for c in range(da.shape[2]):
        x, y = da[:, :, c], db[:, :, c]
        blur = lambda im: gaussian_filter(im, sigma, truncate=truncate, mode="reflect")
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def binarize_shadow(s, threshold: float = 0.5) -> np.ndarray:
    """1 where s >= threshold else 0 (boundary counts as lit)."""
    return (np.asarray(s, dtype=np.float64) >= threshold).astype(np.float64)
