"""Dense trilinear grids over a scene bounding box and their l1 fitting.

Grids store values at nodes; queries interpolate trilinearly and clamp
both the lookup position (to the box) and optionally the value (to a
range such as [0,1] for shadows).  Fitting is plain first-order descent
with Adam moments on scattered l1 subgradients, warm-started from a
per-node weighted average of the targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core

_VOL_MAGIC = "VF3"


@dataclass
class DenseGrid:
    values: np.ndarray  # (nx, ny, nz, C) float64 node values
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray
    vmin: float | None = None
    vmax: float | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.bbox_lo = np.asarray(self.bbox_lo, dtype=np.float64)
        self.bbox_hi = np.asarray(self.bbox_hi, dtype=np.float64)
        if self.values.ndim != 4:
            raise ValueError("grid values must be (nx, ny, nz, channels)")
        if min(self.values.shape[:3]) < 2:
            raise ValueError("grid needs at least 2 nodes per axis")

    @property
    def res(self) -> tuple[int, int, int]:
        return self.values.shape[:3]

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    def copy(self) -> "DenseGrid":
        return DenseGrid(
            self.values.copy(), self.bbox_lo.copy(), self.bbox_hi.copy(),
            self.vmin, self.vmax,
        )

    def interp_weights(self, points: np.ndarray):
        """Corner flat indices (N,8) and trilinear weights (N,8).

        Points outside the box are clamped to it, so every query is a
        convex combination of existing nodes.
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = np.array(self.res, dtype=np.float64)
        u = (p - self.bbox_lo) / (self.bbox_hi - self.bbox_lo) * (n - 1.0)
        u = np.clip(u, 0.0, n - 1.0)
        i0 = np.minimum(np.floor(u), n - 2.0).astype(np.int64)
        f = u - i0
        nx, ny, nz = self.res
        base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
        offs = np.array(
            [0, 1, nz, nz + 1, ny * nz, ny * nz + 1, ny * nz + nz, ny * nz + nz + 1],
            dtype=np.int64,
        )
        idx = base[:, None] + offs[None, :]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        w = np.stack(
            [
                gx * gy * gz, gx * gy * fz, gx * fy * gz, gx * fy * fz,
                fx * gy * gz, fx * gy * fz, fx * fy * gz, fx * fy * fz,
            ],
            axis=1,
        )
        return idx, w

    def query_raw(self, points: np.ndarray) -> np.ndarray:
        idx, w = self.interp_weights(points)
        flat = self.values.reshape(-1, self.channels)
        return np.einsum("nk,nkc->nc", w, flat[idx])

    def query(self, points: np.ndarray) -> np.ndarray:
        """Trilinear lookup with the grid's value clamp applied."""
        out = self.query_raw(points)
        if self.vmin is not None or self.vmax is not None:
            out = np.clip(out, self.vmin, self.vmax)
        return out

    def active_mask(self, raw: np.ndarray) -> np.ndarray:
        """1 where the value clamp passes gradient, 0 where it is flat.

        Bounds are treated as active so projected parameters keep
        receiving inward gradients.
        """
        m = np.ones_like(raw)
        if self.vmin is not None:
            m = m * (raw >= self.vmin)
        if self.vmax is not None:
            m = m * (raw <= self.vmax)
        return m

    def scatter(self, points: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Accumulate per-sample output gradients into a dense node grad."""
        idx, w = self.interp_weights(points)
        g = np.zeros_like(self.values).reshape(-1, self.channels)
        contrib = w[:, :, None] * np.atleast_2d(grad)[:, None, :]
        np.add.at(g, idx.reshape(-1), contrib.reshape(-1, self.channels))
        return g.reshape(self.values.shape)

    def project(self):
        """Clamp node values into the grid's value range in place."""
        if self.vmin is not None or self.vmax is not None:
            np.clip(self.values, self.vmin, self.vmax, out=self.values)


def save_grid(path, grid: DenseGrid, kind: str = "field"):
    """Binary node blob plus a JSON sidecar describing the box."""
    path = Path(path)
    nx, ny, nz = grid.res
    header = f"{_VOL_MAGIC}\n{nx} {ny} {nz} {grid.channels}\n-1.0\n".encode("ascii")
    data = grid.values.astype("<f4").tobytes()
    path.write_bytes(header + data)
    sidecar = {
        "format": "sir-grid-1",
        "kind": kind,
        "res": [nx, ny, nz],
        "channels": grid.channels,
        "bbox_lo": grid.bbox_lo.tolist(),
        "bbox_hi": grid.bbox_hi.tolist(),
        "vmin": grid.vmin,
        "vmax": grid.vmax,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=1, sort_keys=True)
    )


def load_grid(path) -> DenseGrid:
    path = Path(path)
    raw = path.read_bytes()
    nl1 = raw.index(b"\n")
    if raw[:nl1].decode("ascii", "replace") != _VOL_MAGIC:
        raise ValueError(f"{path}: not a grid blob (bad magic at byte 0)")
    nl2 = raw.index(b"\n", nl1 + 1)
    nl3 = raw.index(b"\n", nl2 + 1)
    nx, ny, nz, nc = (int(t) for t in raw[nl1 + 1 : nl2].split())
    need = nx * ny * nz * nc * 4
    payload = raw[nl3 + 1 :]
    if len(payload) < need:
        raise ValueError(
            f"{path}: truncated payload at byte {nl3 + 1 + len(payload)}, "
            f"need {need} bytes"
        )
    values = np.frombuffer(payload[:need], dtype="<f4").reshape(nx, ny, nz, nc)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return DenseGrid(
        values.astype(np.float64),
        np.array(meta["bbox_lo"]),
        np.array(meta["bbox_hi"]),
        meta.get("vmin"),
        meta.get("vmax"),
    )


@dataclass
class Adam:
    """Adam moment estimation over a dense parameter array."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mh = self.m / (1.0 - self.beta1**self.t)
        vh = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class FitReport:
    final_l1: float
    history: list = field(default_factory=list)


def scatter_average(points, targets, res, bbox_lo, bbox_hi, default=0.0):
    """Per-node weighted average of targets; untouched nodes get default."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    nc = targets.shape[1]
    g = DenseGrid(np.zeros(tuple(res) + (nc,)), bbox_lo, bbox_hi)
    num = g.scatter(points, targets)
    den = g.scatter(points, np.ones_like(targets))[..., :1]
    out = np.where(den > 1e-12, num / np.maximum(den, 1e-12), default)
    return out


def fit_grid_l1(
    points,
    targets,
    res,
    bbox_lo,
    bbox_hi,
    *,
    iters=400,
    lr=0.02,
    batch=8192,
    seed=0,
    entity=0,
    vmin=None,
    vmax=None,
    warm_start=True,
    init_value=0.0,
    log_every=50,
):
    """Fit node values to scattered samples under mean l1 error.

    Returns (DenseGrid, FitReport).  Deterministic for fixed seed: the
    minibatch schedule is drawn from the counter RNG.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    if len(points) == 0:
        raise ValueError("cannot fit a grid to an empty sample set")
    n_samples, nc = targets.shape

    if warm_start:
        values = scatter_average(points, targets, res, bbox_lo, bbox_hi, init_value)
    else:
        values = np.full(tuple(res) + (nc,), init_value, dtype=np.float64)
    grid = DenseGrid(values, bbox_lo, bbox_hi, vmin, vmax)
    grid.project()

    opt = Adam(lr=lr)
    stream = core.make_stream(core.PURPOSE_FIT, entity)
    batch = min(batch, n_samples)
    history = []
    for it in range(iters):
        u = core.rng_block(seed, stream, it * batch, batch)
        sel = np.minimum((u * n_samples).astype(np.int64), n_samples - 1)
        p, t = points[sel], targets[sel]
        raw = grid.query_raw(p)
        pred = raw if vmin is None else np.clip(raw, vmin, vmax)
        resid = pred - t
        loss = float(np.mean(np.abs(resid)))
        # residuals at float-noise level would feed sign() with +-eps and
        # random-walk a converged fit; treat them as exactly zero
        g_out = (
            np.sign(resid) * (np.abs(resid) > 1e-12) * grid.active_mask(raw)
            / (batch * nc)
        )
        grad = grid.scatter(p, g_out)
        opt.step(grid.values, grad)
        grid.project()
        if it % log_every == 0:
            history.append((it, loss))

    final = float(np.mean(np.abs(grid.query(points) - targets)))
    history.append((iters, final))
    return grid, FitReport(final_l1=final, history=history)
