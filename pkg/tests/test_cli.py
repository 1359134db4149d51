"""Command line pipeline: artifacts, exit codes, determinism."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from sirkit import cli, grids, imaging, inverse, scenes
from sirkit import shadow as shadow_mod

pytestmark = pytest.mark.filterwarnings("ignore::numba.NumbaWarning")

RES = "24x24"
N_VIEWS = 4
SEED = 5


def run(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="session")
def scene_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    scene = scenes.build_study_scene()
    cams = scenes.study_cameras(count=N_VIEWS, width=24, height=24)
    path = d / "scene.json"
    scenes.save_scene(path, scene, cams)
    return path


@pytest.fixture(scope="session")
def ds_dir(scene_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    code = run(["gen", scene_file, out, "--views", N_VIEWS, "--res", RES,
                "--spp", 16, "--bounces", 2, "--vis-samples", 16,
                "--seed", SEED])
    assert code == 0
    return out


@pytest.fixture(scope="session")
def bake_dir(ds_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("bake")
    code = run(["bake", ds_dir, out, "--grid-res", 16, "--dedup-res", 16,
                "--samples", 64, "--direct-samples", 32, "--fit-iters", 60,
                "--seed", SEED])
    assert code == 0
    return out


FIT_CFG = ["--config", "iterations=100", "--config", "batch=512",
           "--config", "n_importance=4"]


@pytest.fixture(scope="session")
def fit_dir(ds_dir, bake_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = run(["fit", ds_dir, bake_dir, out, *FIT_CFG, "--seed", SEED])
    assert code == 0
    return out


RENDER_ARGS = ["--env-spp", 1, "--spec-samples", 8, "--bounces", 2,
               "--seed", SEED]


@pytest.fixture(scope="session")
def render_dir(ds_dir, fit_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("render")
    code = run(["render", fit_dir / "fields", ds_dir / "scene.json", out,
                "--views", "0,1", "--buffers", "combined", *RENDER_ARGS])
    assert code == 0
    return out


def _data_files(d):
    return sorted(
        p.relative_to(d) for p in Path(d).rglob("*")
        if p.is_file() and p.name != "manifest.json"
    )


def _assert_dirs_byte_identical(a, b):
    fa, fb = _data_files(a), _data_files(b)
    assert fa == fb
    for rel in fa:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


# ------------------------------------------------------------- gen


def test_gen_writes_one_triplet_per_view(ds_dir):
    for v in range(N_VIEWS):
        assert (ds_dir / f"view_{v:03d}.pfm").is_file()
        assert (ds_dir / f"mask_{v:03d}.png").is_file()
        for gt in ("gt_albedo", "gt_roughness"):
            assert (ds_dir / f"{gt}_{v:03d}.pfm").is_file()
        for gt in ("gt_shadow", "gt_emitter"):
            assert (ds_dir / f"{gt}_{v:03d}.png").is_file()
    assert not (ds_dir / f"view_{N_VIEWS:03d}.pfm").exists()
    assert (ds_dir / "scene.json").is_file()
    assert (ds_dir / "cameras.json").is_file()


def test_gen_shadow_masks_are_binary(ds_dir):
    from PIL import Image

    arr = np.asarray(Image.open(ds_dir / "gt_shadow_000.png"))
    assert set(np.unique(arr)) <= {0, 255}


def test_manifest_in_every_artifact_dir(ds_dir, bake_dir, fit_dir,
                                        render_dir):
    for d in (ds_dir, bake_dir, fit_dir, render_dir):
        m = json.loads((d / "manifest.json").read_text())
        assert m["tool"] == "sirkit"
        assert m["seed"] == SEED
        assert m["timing"]["wall_s"] >= 0
        assert m["config_hash"]
        assert m["outputs"]
    assert json.loads(
        (ds_dir / "manifest.json").read_text())["command"] == "gen"


def test_gen_rerun_other_thread_count_byte_identical(scene_file, ds_dir,
                                                     tmp_path):
    out = tmp_path / "ds2"
    code = run(["gen", scene_file, out, "--views", N_VIEWS, "--res", RES,
                "--spp", 16, "--bounces", 2, "--vis-samples", 16,
                "--seed", SEED, "--threads", 2])
    assert code == 0
    _assert_dirs_byte_identical(ds_dir, out)


def test_gen_res_conflict_with_embedded_cameras(scene_file, tmp_path):
    code = run(["gen", scene_file, tmp_path / "x", "--views", N_VIEWS,
                "--res", "8x8", "--spp", 2])
    assert code == 2


# ------------------------------------------------------------ bake


def test_bake_artifacts(bake_dir):
    assert (bake_dir / "irradiance.vol").is_file()
    assert (bake_dir / "shadow_hard.vol").is_file()
    meta = json.loads((bake_dir / "bake_meta.json").read_text())
    assert meta["records"] > 0
    assert meta["bake_points"] > 0
    for name in cli.CACHE_ARRAYS:
        assert (bake_dir / "cache" / f"{name}.npy").is_file()


def test_bake_rerun_byte_identical(ds_dir, bake_dir, tmp_path):
    out = tmp_path / "bake2"
    code = run(["bake", ds_dir, out, "--grid-res", 16, "--dedup-res", 16,
                "--samples", 64, "--direct-samples", 32, "--fit-iters", 60,
                "--seed", SEED, "--threads", 2])
    assert code == 0
    _assert_dirs_byte_identical(bake_dir, out)


def test_bake_hard_grid_in_unit_range(bake_dir):
    g = grids.load_grid(bake_dir / "shadow_hard.vol")
    assert g.values.min() >= 0.0 and g.values.max() <= 1.0


# ------------------------------------------------------------- fit


def test_fit_artifacts(fit_dir):
    for stage in ("stage1", "stage2", "stage3", "fields"):
        for name in cli.GRID_NAMES:
            assert (fit_dir / stage / f"{name}.vol").is_file()
    rows = (fit_dir / "loss_curves.csv").read_text().splitlines()
    assert rows[0] == "stage,iteration,l1"
    assert len(rows) > 3
    cfg = json.loads((fit_dir / "config_resolved.json").read_text())
    assert cfg["iters"] == [40, 40, 20]
    assert cfg["batch"] == 512


def test_fit_rerun_byte_identical(ds_dir, bake_dir, fit_dir, tmp_path):
    out = tmp_path / "fit2"
    code = run(["fit", ds_dir, bake_dir, out, *FIT_CFG, "--seed", SEED,
                "--threads", 1])
    assert code == 0
    _assert_dirs_byte_identical(fit_dir, out)


def test_fit_zero_iterations_checkpoints_equal_initialization(
        ds_dir, bake_dir, tmp_path):
    out = tmp_path / "fit0"
    code = run(["fit", ds_dir, bake_dir, out, "--config", "iterations=0",
                "--seed", SEED])
    assert code == 0
    cache = cli.load_cache(bake_dir / "cache")
    irr = grids.load_grid(bake_dir / "irradiance.vol")
    hard = grids.load_grid(bake_dir / "shadow_hard.vol")
    init = inverse.init_fields(irr.bbox_lo, irr.bbox_hi, irr.res[0],
                               irradiance=irr, shadow_hard=hard)
    inverse.warm_start_albedo(cache, init)
    init.shadow_soft = shadow_mod.init_soft_from_hard(init.shadow_hard)
    final = cli.load_fields(out / "fields")
    for name in cli.GRID_NAMES:
        want = getattr(init, name).values.astype(np.float32)
        got = getattr(final, name).values.astype(np.float32)
        assert np.array_equal(got, want), name
    ck = cli.load_fields(out / "stage1")
    assert np.array_equal(ck.albedo.values, final.albedo.values)


def test_fit_unknown_config_key_is_config_error(ds_dir, bake_dir, tmp_path):
    assert run(["fit", ds_dir, bake_dir, tmp_path / "x",
                "--config", "bogus_key=5"]) == 2


def test_fit_config_json_file(ds_dir, bake_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 10, "batch": 128,
                               "n_importance": 2}))
    out = tmp_path / "fitj"
    assert run(["fit", ds_dir, bake_dir, out, "--config", cfg,
                "--seed", SEED]) == 0
    resolved = json.loads((out / "config_resolved.json").read_text())
    assert resolved["iters"] == [4, 4, 2]
    assert resolved["batch"] == 128


def test_fit_ablation_flags_accepted(ds_dir, bake_dir, tmp_path):
    out = tmp_path / "fit_ns"
    assert run(["fit", ds_dir, bake_dir, out, "--config", "iterations=10",
                "--config", "batch=128", "--config", "n_importance=2",
                "--ablation", "no_soft", "--seed", SEED]) == 0
    f = cli.load_fields(out / "fields")
    assert np.array_equal(f.shadow_soft.values, f.shadow_hard.values)


# ----------------------------------------------------------- render


def test_render_views_subset(render_dir):
    assert (render_dir / "combined_000.pfm").is_file()
    assert (render_dir / "combined_001.pfm").is_file()
    assert not (render_dir / "combined_002.pfm").exists()


def test_render_unknown_buffer_is_config_error(ds_dir, fit_dir, tmp_path):
    assert run(["render", fit_dir / "fields", ds_dir / "scene.json",
                tmp_path / "x", "--buffers", "nonsense"]) == 2


def test_render_bad_view_index_is_data_error(ds_dir, fit_dir, tmp_path):
    assert run(["render", fit_dir / "fields", ds_dir / "scene.json",
                tmp_path / "x", "--views", "99"]) == 3


# ------------------------------------------------------------- edit


def test_noop_edit_renders_byte_identical(ds_dir, bake_dir, fit_dir,
                                          render_dir, tmp_path):
    spec = tmp_path / "noop.json"
    spec.write_text(json.dumps({"edits": []}))
    out = tmp_path / "edit0"
    code = run(["edit", fit_dir / "fields", ds_dir / "scene.json", spec, out,
                "--cache", bake_dir, "--views", "0,1",
                "--buffers", "combined", *RENDER_ARGS])
    assert code == 0
    for v in (0, 1):
        a = (out / f"combined_{v:03d}.pfm").read_bytes()
        b = (render_dir / f"combined_{v:03d}.pfm").read_bytes()
        assert a == b


def test_emitter_move_rebakes_fields(ds_dir, bake_dir, fit_dir, tmp_path):
    spec = tmp_path / "move.json"
    spec.write_text(json.dumps(
        {"edits": [{"op": "move", "instance": 8,
                    "translate": [-0.5, 0.0, 0.2]}]}
    ))
    out = tmp_path / "edit1"
    code = run(["edit", fit_dir / "fields", ds_dir / "scene.json", spec, out,
                "--cache", bake_dir, "--views", "0", "--samples", 64,
                *RENDER_ARGS])
    assert code == 0
    moved = cli.load_fields(out / "fields")
    orig = cli.load_fields(fit_dir / "fields")
    assert not np.array_equal(moved.irradiance.values,
                              orig.irradiance.values)
    assert np.array_equal(moved.albedo.values, orig.albedo.values)
    edited, _ = scenes.load_scene(out / "scene.json")
    emitter = [p for p in edited.primitives if p.is_emitter][0]
    assert emitter.position[0] == pytest.approx(0.3 - 0.5)


def test_edit_unknown_op_is_config_error(ds_dir, fit_dir, tmp_path):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps({"edits": [{"op": "teleport"}]}))
    assert run(["edit", fit_dir / "fields", ds_dir / "scene.json", spec,
                tmp_path / "x"]) == 2


def test_edit_bad_instance_is_data_error(ds_dir, fit_dir, tmp_path):
    spec = tmp_path / "bad2.json"
    spec.write_text(json.dumps(
        {"edits": [{"op": "move", "instance": 99, "translate": [1, 0, 0]}]}
    ))
    assert run(["edit", fit_dir / "fields", ds_dir / "scene.json", spec,
                tmp_path / "x"]) == 3


# ---------------------------------------------------------- metrics


def test_metrics_identical_dirs_hits_psnr_sentinel(render_dir, tmp_path):
    report = tmp_path / "m" / "report.json"
    code = run(["metrics", render_dir, render_dir, "--report", report])
    assert code == 0
    r = json.loads(report.read_text())
    assert r["averages"]["psnr"] == math.inf
    assert r["averages"]["ssim"] == pytest.approx(1.0)
    assert r["averages"]["mse"] == 0.0
    assert "Infinity" in report.read_text()


def test_metrics_disjoint_dirs_is_data_error(render_dir, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run(["metrics", render_dir, empty,
                "--report", tmp_path / "r.json"]) == 3


# ------------------------------------------------- errors, plumbing


def test_missing_scene_is_data_error(tmp_path):
    assert run(["gen", tmp_path / "nope.json", tmp_path / "x"]) == 3


def test_invalid_scene_schema_is_data_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"not": "a scene"}')
    assert run(["gen", bad, tmp_path / "x"]) == 3


def test_bad_res_is_config_error(scene_file, tmp_path):
    assert run(["gen", scene_file, tmp_path / "x", "--res", "10"]) == 2


def test_locked_output_dir_is_data_error(scene_file, tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").touch()
    assert run(["gen", scene_file, out, "--views", 1, "--res", RES,
                "--spp", 2]) == 3


def test_lock_released_after_run(ds_dir):
    assert not (ds_dir / ".lock").exists()


def test_nan_in_fields_is_numerical_error(ds_dir, fit_dir, tmp_path):
    broken = tmp_path / "broken"
    broken.mkdir()
    for name in cli.GRID_NAMES:
        src = fit_dir / "fields" / f"{name}.vol"
        (broken / f"{name}.vol").write_bytes(src.read_bytes())
        (broken / f"{name}.vol.json").write_bytes(
            src.with_suffix(".vol.json").read_bytes()
        )
    g = grids.load_grid(broken / "albedo.vol")
    g.values[0, 0, 0, :] = np.nan
    grids.save_grid(broken / "albedo.vol", g, kind="albedo")
    assert run(["render", broken, ds_dir / "scene.json", tmp_path / "x",
                "--views", "0", *RENDER_ARGS]) == 4


def test_bad_sir_threads_env_is_config_error(scene_file, tmp_path,
                                             monkeypatch):
    monkeypatch.setenv("SIR_THREADS", "lots")
    assert run(["gen", scene_file, tmp_path / "x", "--views", 1,
                "--res", RES, "--spp", 2]) == 2


def test_sir_threads_env_accepted(scene_file, tmp_path, monkeypatch):
    monkeypatch.setenv("SIR_THREADS", "1")
    out = tmp_path / "ds_env"
    assert run(["gen", scene_file, out, "--views", 1, "--res", RES,
                "--spp", 4, "--vis-samples", 4, "--seed", SEED]) == 0
    assert json.loads((out / "manifest.json").read_text())["threads"] == 1


def test_version_flag():
    with pytest.raises(SystemExit) as e:
        cli.main(["--version"])
    assert e.value.code == 0
