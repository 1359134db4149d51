"""Pipeline command line: gen, bake, fit, render, edit, metrics.

One subcommand per pipeline step, JSON for every config, and a
manifest in every artifact directory.  Exit codes: 0 ok, 2 config
error, 3 data error, 4 numerical failure.  All data artifacts are
byte-identical across reruns with the same seed and config, and across
thread counts; the manifest additionally records wall time.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

import sirkit

from . import core, forward, grids, imaging, inverse, lighting, scenes

log = logging.getLogger("sirkit.cli")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_CATEGORY = {EXIT_CONFIG: "config", EXIT_DATA: "data",
             EXIT_NUMERICAL: "numerical"}

GRID_NAMES = ("albedo", "roughness", "irradiance", "shadow_hard",
              "shadow_soft")
CACHE_ARRAYS = ("points", "normals", "frames_t", "frames_b", "env_maps",
                "x", "n", "wo", "inst", "c", "handle", "view")
BUFFER_NAMES = ("combined", "diffuse", "specular", "albedo", "roughness",
                "irradiance", "shadow", "normal", "depth")


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _config_error(msg):
    return CliError(EXIT_CONFIG, msg)


def _data_error(msg):
    return CliError(EXIT_DATA, msg)


def _guard_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise CliError(EXIT_NUMERICAL, f"non-finite values in {what}")
    return arr


# ------------------------------------------------------- plumbing


class _OutputLock:
    """One running command per output directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise _data_error(
                f"output directory is locked by another run: {self.path}"
            )
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                   threads: int, wall_s: float, inputs, outputs):
    manifest = {
        "tool": "sirkit",
        "version": sirkit.__version__,
        "command": command,
        "config_hash": _config_hash(config),
        "seed": seed,
        "threads": threads,
        "timing": {"wall_s": round(wall_s, 3)},
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _resolve_threads(requested):
    if requested is None:
        env = os.environ.get("SIR_THREADS")
        if env is not None:
            try:
                requested = int(env)
            except ValueError:
                raise _config_error(f"SIR_THREADS must be an int, got {env!r}")
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    if requested is None:
        return limit
    if requested < 1:
        raise _config_error("--threads must be >= 1")
    n = min(requested, limit)
    numba.set_num_threads(n)
    return n


def _prepare_out(path_str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scene_file(path_str):
    path = Path(path_str)
    if not path.is_file():
        raise _data_error(f"scene file not found: {path}")
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise _data_error(f"{path}:{e.lineno}: invalid JSON ({e.msg})")
    try:
        return scenes.scene_from_dict(data)
    except (KeyError, ValueError, TypeError) as e:
        raise _data_error(f"{path}: invalid scene schema: {e}")


def save_fields(dir_path: Path, fs: inverse.FieldSet):
    dir_path.mkdir(parents=True, exist_ok=True)
    out = []
    for name in GRID_NAMES:
        p = dir_path / f"{name}.vol"
        grids.save_grid(p, getattr(fs, name), kind=name)
        out += [p, p.with_suffix(".vol.json")]
    return out


def load_fields(dir_path) -> inverse.FieldSet:
    dir_path = Path(dir_path)
    kw = {}
    for name in GRID_NAMES:
        p = dir_path / f"{name}.vol"
        if not p.is_file():
            raise _data_error(f"missing field grid: {p}")
        kw[name] = grids.load_grid(p)
    return inverse.FieldSet(**kw)


def save_cache(dir_path: Path, cache: inverse.SurfaceSampleCache):
    dir_path.mkdir(parents=True, exist_ok=True)
    out = []
    for name in CACHE_ARRAYS:
        p = dir_path / f"{name}.npy"
        np.save(p, getattr(cache, name))
        out.append(p)
    return out


def load_cache(dir_path) -> inverse.SurfaceSampleCache:
    dir_path = Path(dir_path)
    kw = {}
    for name in CACHE_ARRAYS:
        p = dir_path / f"{name}.npy"
        if not p.is_file():
            raise _data_error(f"missing cache array: {p}")
        kw[name] = np.load(p)
    return inverse.SurfaceSampleCache(**kw)


def _parse_views(spec, total):
    if spec in (None, "all"):
        return list(range(total))
    try:
        views = [int(v) for v in str(spec).split(",") if v != ""]
    except ValueError:
        raise _config_error(f"--views must be 'all' or ints, got {spec!r}")
    bad = [v for v in views if not 0 <= v < total]
    if bad:
        raise _data_error(f"view index out of range: {bad[0]} (have {total})")
    return views


def _load_dataset(dir_str):
    d = Path(dir_str)
    scene, cams = _load_scene_file(d / "scene.json")
    if not cams:
        raise _data_error(f"{d}/scene.json carries no cameras")
    images = []
    for v in range(len(cams)):
        p = d / f"view_{v:03d}.pfm"
        if not p.is_file():
            raise _data_error(f"missing view image: {p}")
        images.append(imaging.read_pfm(p))
    return d, scene, cams, images


# ------------------------------------------------------------ gen


def _parse_res(spec):
    try:
        w, h = (int(t) for t in str(spec).lower().split("x"))
    except ValueError:
        raise _config_error(f"--res expects WxH, got {spec!r}")
    if w <= 0 or h <= 0:
        raise _config_error("--res must be positive")
    return w, h


def cmd_gen(args) -> int:
    scene, embedded = _load_scene_file(args.scene)
    w, h = _parse_res(args.res)
    if embedded and len(embedded) >= args.views:
        cams = embedded[: args.views]
        if cams[0].width != w or cams[0].height != h:
            raise _config_error(
                f"--res {w}x{h} conflicts with embedded cameras "
                f"({cams[0].width}x{cams[0].height})"
            )
    else:
        cams = scenes.orbit_cameras(
            count=args.views, center=tuple(args.orbit_center),
            radius=args.orbit_radius, height=args.orbit_height,
            target=tuple(args.orbit_target), fov_deg=args.fov,
            width=w, height_px=h,
        )
    out = _prepare_out(args.out)
    t0 = time.time()
    outputs = []
    with _OutputLock(out):
        for v, cam in enumerate(cams):
            img = forward.path_trace(
                scene, cam, spp=args.spp, max_bounces=args.bounces,
                seed=args.seed, view_id=v,
            )
            _guard_finite(img, f"view {v} render")
            gt = forward.render_gt_buffers(
                scene, cam, vis_samples=args.vis_samples, seed=args.seed,
                view_id=v,
            )
            p = out / f"view_{v:03d}.pfm"
            imaging.write_pfm(p, img)
            outputs.append(p)
            p = out / f"mask_{v:03d}.png"
            imaging.write_mask_png(p, imaging.InstanceMask(gt["instances"]))
            outputs.append(p)
            p = out / f"gt_albedo_{v:03d}.pfm"
            imaging.write_pfm(p, _guard_finite(gt["albedo"], "gt albedo"))
            outputs.append(p)
            p = out / f"gt_roughness_{v:03d}.pfm"
            imaging.write_pfm(p, gt["roughness"])
            outputs.append(p)
            for key, fname in (("shadow_binary", "gt_shadow"),
                               ("emitter_mask", "gt_emitter")):
                p = out / f"{fname}_{v:03d}.png"
                u8 = (np.asarray(gt[key], dtype=np.float64) * 255).astype(
                    np.uint8
                )
                imaging.write_png(p, np.repeat(u8[:, :, None], 3, axis=2))
                outputs.append(p)
            log.info("gen: view %d/%d done", v + 1, len(cams))
        scenes.save_scene(out / "scene.json", scene, cams)
        (out / "cameras.json").write_text(
            json.dumps([c.to_dict() for c in cams], indent=1)
        )
        outputs += [out / "scene.json", out / "cameras.json"]
        write_manifest(
            out, "gen", vars(args), args.seed, args.threads_resolved,
            time.time() - t0, [args.scene], outputs,
        )
    return 0


# ----------------------------------------------------------- bake


def cmd_bake(args) -> int:
    d, scene, cams, images = _load_dataset(args.dataset)
    out = _prepare_out(args.out)
    t0 = time.time()
    with _OutputLock(out):
        cache = inverse.build_sample_cache(
            scene, cams, images, dedup_res=args.dedup_res,
            env_spp=args.env_spp, max_bounces=args.bounces, seed=args.seed,
        )
        if len(cache) == 0:
            raise _data_error("dataset produced an empty sample cache")
        cfg = inverse.TrainConfig(
            mu=args.mu, n_hemisphere=args.samples,
            n_direct=args.direct_samples, grid_res=args.grid_res,
            dedup_res=args.dedup_res, phase2_iters=args.fit_iters,
            phase2_batch=args.fit_batch, max_bounces=args.bounces,
            env_spp=args.env_spp, seed=args.seed,
        )
        source = lighting.PathTracedSource(
            scene, max_bounces=args.bounces, seed=args.seed
        )
        irr_grid, hard_grid = inverse.phase2_fit(cache, source, cfg)
        _guard_finite(irr_grid.values, "irradiance grid")
        _guard_finite(hard_grid.values, "hard shadow grid")

        outputs = save_cache(out / "cache", cache)
        grids.save_grid(out / "irradiance.vol", irr_grid, kind="irradiance")
        grids.save_grid(out / "shadow_hard.vol", hard_grid, kind="shadow_hard")
        meta = {
            "mu": args.mu, "samples": args.samples,
            "direct_samples": args.direct_samples,
            "grid_res": args.grid_res, "dedup_res": args.dedup_res,
            "env_spp": args.env_spp, "bounces": args.bounces,
            "seed": args.seed, "records": len(cache),
            "bake_points": int(cache.points.shape[0]),
        }
        (out / "bake_meta.json").write_text(json.dumps(meta, indent=1))
        outputs += [out / "irradiance.vol", out / "shadow_hard.vol",
                    out / "bake_meta.json"]
        write_manifest(out, "bake", vars(args), args.seed,
                       args.threads_resolved, time.time() - t0,
                       [str(d)], outputs)
    return 0


# ------------------------------------------------------------ fit


def _coerce_config_value(key, value, current):
    if isinstance(current, tuple):
        if isinstance(value, (int, float)):
            value = [value] * len(current)
        if isinstance(value, str):
            value = [float(t) for t in value.split(",")]
        if len(value) != len(current):
            raise _config_error(
                f"config key {key!r} expects {len(current)} values"
            )
        cast = int if all(isinstance(v, int) for v in current) else float
        return tuple(cast(v) for v in value)
    if isinstance(current, bool):
        if isinstance(value, str):
            value = {"true": True, "false": False, "1": True,
                     "0": False}.get(value.lower())
            if value is None:
                raise _config_error(f"config key {key!r} expects a bool")
        return bool(value)
    return type(current)(value)


def parse_train_config(entries, seed) -> inverse.TrainConfig:
    """Build a TrainConfig from JSON files and key=value overrides.

    The shorthand iterations=N splits N across the stages 40/40/20.
    """
    cfg = inverse.TrainConfig(seed=seed)
    merged = {}
    for entry in entries or []:
        if "=" in entry and not entry.endswith(".json"):
            key, _, raw = entry.partition("=")
            try:
                merged[key.strip()] = json.loads(raw)
            except json.JSONDecodeError:
                merged[key.strip()] = raw
        else:
            p = Path(entry)
            if not p.is_file():
                raise _data_error(f"config file not found: {p}")
            try:
                loaded = json.loads(p.read_text())
            except json.JSONDecodeError as e:
                raise _config_error(f"{p}:{e.lineno}: invalid JSON ({e.msg})")
            if not isinstance(loaded, dict):
                raise _config_error(f"{p}: config must be a JSON object")
            merged.update(loaded)

    known = {f.name for f in dc_fields(inverse.TrainConfig)}
    for key, value in merged.items():
        if key == "iterations":
            n = int(value)
            a = int(n * 0.4)
            cfg.iters = (a, a, n - 2 * a)
            continue
        if key == "preset":
            if value != "appendix":
                raise _config_error(f"unknown preset {value!r}")
            cfg.lambda_albedo, cfg.lambda_rough = 3e-4, 1e-3
            continue
        if key not in known:
            raise _config_error(f"unknown config key {key!r}")
        try:
            setattr(cfg, key, _coerce_config_value(
                key, value, getattr(cfg, key)))
        except (TypeError, ValueError) as e:
            raise _config_error(f"bad value for config key {key!r}: {e}")
    cfg.seed = merged.get("seed", seed)
    try:
        cfg.__post_init__()
    except ValueError as e:
        raise _config_error(str(e))
    return cfg


def cmd_fit(args) -> int:
    baked = Path(args.baked)
    cache = load_cache(baked / "cache")
    for name in ("irradiance", "shadow_hard"):
        if not (baked / f"{name}.vol").is_file():
            raise _data_error(f"missing baked grid: {baked / (name + '.vol')}")
    irr = grids.load_grid(baked / "irradiance.vol")
    hard = grids.load_grid(baked / "shadow_hard.vol")
    cfg = parse_train_config(args.config, args.seed)
    if irr.res[0] != cfg.grid_res:
        cfg.grid_res = irr.res[0]

    out = _prepare_out(args.out)
    t0 = time.time()
    with _OutputLock(out):
        fields = inverse.init_fields(
            irr.bbox_lo, irr.bbox_hi, cfg.grid_res,
            irradiance=irr, shadow_hard=hard,
        )
        history = {}
        outputs = []

        def checkpoint(mode, fs):
            outputs.extend(save_fields(out / mode, fs))

        fitted = inverse.run_phase3(
            cache, fields, cfg, ablation=args.ablation or None,
            history=history, on_stage_end=checkpoint,
        )
        for name in GRID_NAMES:
            _guard_finite(getattr(fitted, name).values, f"{name} grid")
        outputs += save_fields(out / "fields", fitted)
        with open(out / "loss_curves.csv", "w", newline="") as f:
            wcsv = csv.writer(f)
            wcsv.writerow(["stage", "iteration", "l1"])
            for mode in inverse.STAGES:
                for it, loss in history.get(mode, []):
                    wcsv.writerow([mode, it, f"{loss:.8f}"])
        cfg_json = {f.name: getattr(cfg, f.name)
                    for f in dc_fields(inverse.TrainConfig)}
        (out / "config_resolved.json").write_text(
            json.dumps(cfg_json, indent=1, default=list)
        )
        outputs += [out / "loss_curves.csv", out / "config_resolved.json"]
        write_manifest(out, "fit", {"config": cfg_json,
                                    "ablation": args.ablation},
                       cfg.seed, args.threads_resolved, time.time() - t0,
                       [args.dataset, args.baked], outputs)
    return 0


# ---------------------------------------------------------- render


def _render_views(scene, cams, fields, views, out, args, prefix="",
                  transport_matpack=None):
    cfg = forward.RenderConfig(
        max_bounces=args.bounces, env_spp=args.env_spp,
        spec_samples=args.spec_samples, seed=args.seed,
    )
    wanted = BUFFER_NAMES if args.buffers == "all" else tuple(
        b for b in str(args.buffers).split(",") if b
    )
    bad = [b for b in wanted if b not in BUFFER_NAMES]
    if bad:
        raise _config_error(
            f"unknown buffer {bad[0]!r} (have {', '.join(BUFFER_NAMES)})"
        )
    outputs = []
    for v in views:
        buf = forward.render_decomposed(
            scene, cams[v], fields, cfg, view_id=v,
            transport_matpack=transport_matpack,
        )
        for name in wanted:
            arr = getattr(buf, name)
            _guard_finite(arr, f"{name} buffer view {v}")
            p = out / f"{prefix}{name}_{v:03d}.pfm"
            imaging.write_pfm(p, arr)
            outputs.append(p)
        log.info("render: view %d done", v)
    return outputs


def cmd_render(args) -> int:
    scene, cams = _load_scene_file(args.scene)
    if not cams:
        raise _data_error(f"{args.scene} carries no cameras")
    fields = load_fields(args.fields)
    views = _parse_views(args.views, len(cams))
    out = _prepare_out(args.out)
    t0 = time.time()
    with _OutputLock(out):
        outputs = _render_views(scene, cams, fields, views, out, args)
        write_manifest(out, "render", vars(args), args.seed,
                       args.threads_resolved, time.time() - t0,
                       [args.scene, args.fields], outputs)
    return 0


# ------------------------------------------------------------ edit


def _apply_edits(scene, edits):
    """Apply declarative edit ops; returns (scene, relight_needed,
    reclassify_needed)."""
    relight = False
    reclassify = False
    for i, op in enumerate(edits):
        if not isinstance(op, dict) or "op" not in op:
            raise _config_error(f"edit {i}: each edit needs an 'op' key")
        kind = op["op"]
        try:
            if kind == "move":
                scene = forward.move_instance(
                    scene, int(op["instance"]), op["translate"]
                )
                moved_emitter = any(
                    p.is_emitter and p.instance_id == int(op["instance"])
                    for p in scene.primitives
                )
                relight = True
                reclassify = reclassify or moved_emitter
            elif kind == "set_emission":
                scene = forward.set_emission(
                    scene, int(op["instance"]), op["emission"]
                )
                relight = reclassify = True
            elif kind == "replace_material":
                mat = scenes.Material(
                    albedo=np.asarray(op["albedo"], dtype=np.float64),
                    roughness=float(op.get("roughness", 0.5)),
                    specular=bool(op.get("specular", True)),
                )
                scene = forward.replace_material(
                    scene, int(op["instance"]), mat
                )
                relight = True
            elif kind == "insert":
                prim = scenes.Primitive(
                    shape=op["shape"],
                    params=np.asarray(op["params"], dtype=np.float64),
                    position=np.asarray(op.get("position", [0, 0, 0]),
                                        dtype=np.float64),
                )
                mat = scenes.Material(
                    albedo=np.asarray(op.get("albedo", [0.5, 0.5, 0.5]),
                                      dtype=np.float64),
                    roughness=float(op.get("roughness", 0.5)),
                    specular=bool(op.get("specular", True)),
                )
                scene = forward.insert_object(scene, prim, mat)
                relight = reclassify = True
            else:
                raise _config_error(f"edit {i}: unknown op {kind!r}")
        except KeyError as e:
            raise _config_error(f"edit {i} ({kind}): missing key {e}")
        except ValueError as e:
            raise _data_error(f"edit {i} ({kind}): {e}")
    return scene, relight, reclassify


def cmd_edit(args) -> int:
    scene, cams = _load_scene_file(args.scene)
    if not cams:
        raise _data_error(f"{args.scene} carries no cameras")
    fields = load_fields(args.fields)
    spec_path = Path(args.edit)
    if not spec_path.is_file():
        raise _data_error(f"edit file not found: {spec_path}")
    try:
        spec = json.loads(spec_path.read_text())
    except json.JSONDecodeError as e:
        raise _data_error(f"{spec_path}:{e.lineno}: invalid JSON ({e.msg})")
    if not isinstance(spec, dict) or "edits" not in spec:
        raise _config_error(f"{spec_path}: expected an object with 'edits'")

    edited, relight, reclassify = _apply_edits(scene, spec["edits"])
    views = _parse_views(args.views, len(cams))
    out = _prepare_out(args.out)
    t0 = time.time()
    with _OutputLock(out):
        out_fields = fields
        if relight and args.cache:
            cache = load_cache(Path(args.cache) / "cache")
            out_fields = forward.relight_fields(
                edited, fields, cache, bake_seed=args.seed,
                irr_samples=args.samples, max_bounces=args.bounces,
                reclassify=reclassify, mu=args.mu,
            )
            for name in GRID_NAMES:
                _guard_finite(getattr(out_fields, name).values,
                              f"{name} grid after relight")
        elif relight:
            log.warning("edit changes lighting but no --cache was given; "
                        "rendering with stale light fields")
        outputs = _render_views(edited, cams, out_fields, views, out, args)
        scenes.save_scene(out / "scene.json", edited, cams)
        outputs.append(out / "scene.json")
        if out_fields is not fields:
            outputs += save_fields(out / "fields", out_fields)
        write_manifest(out, "edit", {"edit": spec, "args": vars(args)},
                       args.seed, args.threads_resolved, time.time() - t0,
                       [args.scene, args.fields, args.edit], outputs)
    return 0


# --------------------------------------------------------- metrics


def _binary_from_png(path):
    from PIL import Image

    arr = np.asarray(Image.open(path), dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr >= 128).astype(np.float64)


def cmd_metrics(args) -> int:
    pred, gt = Path(args.pred), Path(args.gt)
    for d in (pred, gt):
        if not d.is_dir():
            raise _data_error(f"not a directory: {d}")
    report_path = Path(args.report)
    out = report_path.parent if str(report_path.parent) != "" else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    per_image = {}
    sums = {}

    def add(name, key, value):
        per_image.setdefault(name, {})[key] = value
        sums.setdefault(key, []).append(value)

    pfms = sorted(p.name for p in pred.glob("*.pfm")
                  if (gt / p.name).is_file())
    pngs = sorted(p.name for p in pred.glob("*.png")
                  if (gt / p.name).is_file())
    if not pfms and not pngs:
        raise _data_error(
            f"no artifact names shared between {pred} and {gt}"
        )
    for name in pfms:
        a = imaging.read_pfm(pred / name)
        b = imaging.read_pfm(gt / name)
        if a.shape != b.shape:
            raise _data_error(
                f"{name}: shape {a.shape} vs {b.shape} in the two dirs"
            )
        if "roughness" in name:
            add(name, "mse", imaging.mse(a, b))
            continue
        ta, tb = core.tonemap_metric(a), core.tonemap_metric(b)
        add(name, "psnr", imaging.psnr(ta, tb))
        add(name, "ssim", imaging.ssim(ta, tb))
        add(name, "mse", imaging.mse(ta, tb))
    for name in pngs:
        if "mask" in name:
            continue
        a = _binary_from_png(pred / name)
        b = _binary_from_png(gt / name)
        if a.shape != b.shape:
            raise _data_error(
                f"{name}: shape {a.shape} vs {b.shape} in the two dirs"
            )
        add(name, "shadow_mse", imaging.mse(a, b))

    averages = {k: float(np.mean(v)) for k, v in sums.items()}
    report = {"per_image": per_image, "averages": averages,
              "pred": str(pred), "gt": str(gt)}
    report_path.write_text(json.dumps(report, indent=1))
    write_manifest(out, "metrics", vars(args), args.seed,
                   args.threads_resolved, time.time() - t0,
                   [str(pred), str(gt)], [report_path])
    return 0


# ------------------------------------------------------------ main


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: SIR_THREADS or all cores)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sirkit",
        description="multi-view inverse rendering over analytic SDF scenes",
    )
    ap.add_argument("--version", action="version",
                    version=f"sirkit {sirkit.__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a posed multi-view dataset")
    p.add_argument("scene")
    p.add_argument("out")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--spp", type=int, default=256)
    p.add_argument("--res", default="128x128")
    p.add_argument("--bounces", type=int, default=4)
    p.add_argument("--vis-samples", type=int, default=64)
    p.add_argument("--orbit-radius", type=float, default=1.25)
    p.add_argument("--orbit-height", type=float, default=1.7)
    p.add_argument("--orbit-center", type=float, nargs=3,
                   default=[0.0, 0.0, 0.0])
    p.add_argument("--orbit-target", type=float, nargs=3,
                   default=[0.0, 0.7, 0.0])
    p.add_argument("--fov", type=float, default=72.0)
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("bake", help="phase-2 irradiance and shadow bake")
    p.add_argument("dataset")
    p.add_argument("out")
    p.add_argument("--mu", type=float, default=3.0)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--direct-samples", type=int, default=256)
    p.add_argument("--grid-res", type=int, default=64)
    p.add_argument("--dedup-res", type=int, default=64)
    p.add_argument("--env-spp", type=int, default=1)
    p.add_argument("--bounces", type=int, default=2)
    p.add_argument("--fit-iters", type=int, default=400)
    p.add_argument("--fit-batch", type=int, default=8192)
    _add_common(p)
    p.set_defaults(func=cmd_bake)

    p = sub.add_parser("fit", help="phase-3 staged material estimation")
    p.add_argument("dataset")
    p.add_argument("baked")
    p.add_argument("out")
    p.add_argument("--config", action="append", default=[],
                   help="JSON file or key=value; repeatable")
    p.add_argument("--ablation", choices=["no_shadow", "no_soft"],
                   default=None)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render fitted fields")
    p.add_argument("fields")
    p.add_argument("scene")
    p.add_argument("out")
    p.add_argument("--views", default="all")
    p.add_argument("--buffers", default="combined")
    p.add_argument("--env-spp", type=int, default=1)
    p.add_argument("--spec-samples", type=int, default=64)
    p.add_argument("--bounces", type=int, default=2)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("edit", help="apply a declarative scene edit")
    p.add_argument("fields")
    p.add_argument("scene")
    p.add_argument("edit")
    p.add_argument("out")
    p.add_argument("--cache", default=None,
                   help="bake dir for relighting edited emitters")
    p.add_argument("--views", default="all")
    p.add_argument("--buffers", default="combined")
    p.add_argument("--env-spp", type=int, default=1)
    p.add_argument("--spec-samples", type=int, default=64)
    p.add_argument("--bounces", type=int, default=2)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--mu", type=float, default=3.0)
    _add_common(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("metrics", help="compare two artifact directories")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--report", default="metrics/report.json")
    _add_common(p)
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        args.threads_resolved = _resolve_threads(args.threads)
        return args.func(args)
    except CliError as e:
        print(f"sirkit: error: {_CATEGORY[e.code]}: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"sirkit: error: data: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
