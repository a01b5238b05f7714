import json

import numpy as np
import pytest

from layercut import config as cfgmod
from layercut import synthetic
from layercut.cli import main
from layercut.errors import AssetError, ConfigError
from layercut.mesh import save_mesh
from layercut.rig import save_pose, save_rig
from layercut.seglift import save_labels

TINY_DEMO = {
    "schedule": {"render_size": 32},
    "metrics": {"views": 4},
    "refine": {"steps": 20, "visibility_size": 64},
    "demo": {"rig_resolution": 24, "gt_resolution": 24, "grid_resolution": 12, "init_steps": 20, "geo_steps": 10,
             "tex_steps": 10, "tex_sds_warmup": 5, "lift_views": 8, "eval_samples": 2000,
             "eval_iou_resolution": 24},
}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def test_defaults_without_file():
    cfg = cfgmod.load_config()
    assert cfg == cfgmod.DEFAULTS
    assert cfg is not cfgmod.DEFAULTS


def test_file_merges_over_defaults(tmp_path):
    cfg = cfgmod.load_config(write_json(tmp_path / "c.json", {"seed": 7, "weights": {"seg_comp": 2.0}}))
    assert cfg["seed"] == 7
    assert cfg["weights"]["seg_comp"] == 2.0
    assert cfg["weights"]["rec_h_geo"] == cfgmod.DEFAULTS["weights"]["rec_h_geo"]


@pytest.mark.parametrize("doc", [{"nope": 1}, {"weights": {"nope": 1}}, {"weights": 3}])
def test_bad_keys_rejected(tmp_path, doc):
    with pytest.raises(ConfigError):
        cfgmod.load_config(write_json(tmp_path / "c.json", doc))


def test_bad_files_rejected(tmp_path):
    with pytest.raises(ConfigError):
        cfgmod.load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        cfgmod.load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        cfgmod.load_config(write_json(tmp_path / "list.json", [1, 2]))


def test_overrides():
    cfg = cfgmod.load_config()
    out = cfgmod.apply_overrides(cfg, {"seed": 3, "schedule.geo_steps": 5, "grid.resolution": None})
    assert out["seed"] == 3 and out["schedule"]["geo_steps"] == 5
    assert out["grid"]["resolution"] == cfg["grid"]["resolution"]
    assert cfg["seed"] == 0
    for bad in ("schedule.nope", "nope.geo_steps", "seed.x"):
        with pytest.raises(ConfigError):
            cfgmod.apply_overrides(cfg, {bad: 1})


def test_hash_and_snapshot(tmp_path):
    cfg = cfgmod.load_config()
    assert cfgmod.config_hash(cfg) == cfgmod.config_hash(json.loads(json.dumps(cfg)))
    assert cfgmod.config_hash(cfg) != cfgmod.config_hash(cfgmod.apply_overrides(cfg, {"seed": 1}))
    path = cfgmod.write_snapshot(cfg, tmp_path / "run")
    assert json.loads(path.read_text()) == cfg


def test_typed_sections():
    cfg = cfgmod.load_config()
    assert cfgmod.optim_schedule(cfg).geo_steps == cfg["schedule"]["geo_steps"]
    assert cfgmod.loss_weights(cfg).seg_comp == cfg["weights"]["seg_comp"]
    assert cfgmod.prompt_config(cfg).gender_word == "person"
    with pytest.raises(ConfigError):
        cfgmod.loss_weights(cfgmod.apply_overrides(cfg, {"weights.seg_comp": -1.0}))
    with pytest.raises(ConfigError):
        cfgmod.optim_schedule(cfgmod.apply_overrides(cfg, {"schedule.geo_lr": 0.0}))
    with pytest.raises(ConfigError):
        cfgmod.prompt_config(cfgmod.apply_overrides(cfg, {"prompts.gender": 3}))


@pytest.fixture(scope="module")
def assets(tmp_path_factory):
    d = tmp_path_factory.mktemp("assets")
    scene = synthetic.make_scene(24, 24)
    save_mesh(scene.scan, d / "scan.obj")
    save_labels(scene.scan.labels, d / "labels.txt")
    save_rig(scene.rig, d / "rig.json")
    save_pose(scene.input_pose, d / "pose.json")
    return d, scene


def test_decompose_without_guidance_is_a_config_error(assets, tmp_path, capsys):
    d, _ = assets
    rc = main(["decompose", "--scan", str(d / "scan.obj"), "--labels", str(d / "labels.txt"),
               "--rig", str(d / "rig.json"), "--pose", str(d / "pose.json"), "--out-dir", str(tmp_path)])
    assert rc == ConfigError.exit_code == 2
    assert "layercut:" in capsys.readouterr().err


def test_missing_mesh_is_an_asset_error(tmp_path):
    rc = main(["render", "--mesh", str(tmp_path / "none.obj"), "--out-dir", str(tmp_path / "out")])
    assert rc == AssetError.exit_code == 3


def test_unknown_config_key_exit_code(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"nope": 1})
    rc = main(["render", "--config", str(cfg), "--mesh", "x.obj", "--out-dir", str(tmp_path / "out")])
    assert rc == ConfigError.exit_code


def test_render_writes_buffers(assets, tmp_path):
    d, _ = assets
    rc = main(["render", "--mesh", str(d / "scan.obj"), "--labels", str(d / "labels.txt"), "--views", "2",
               "--size", "32", "--out-dir", str(tmp_path)])
    assert rc == 0
    assert any(p.suffix == ".png" for p in tmp_path.iterdir())
    assert any(p.suffix == ".fid" for p in tmp_path.iterdir())


def run_tiny_demo(tmp_path, name):
    cfg = write_json(tmp_path / "tiny.json", TINY_DEMO)
    out = tmp_path / name
    rc = main(["demo-synthetic", "--config", str(cfg), "--seed", "5", "--out-dir", str(out)])
    assert rc in (0, 1)
    return out


def test_demo_is_byte_identical_across_runs(tmp_path):
    a = run_tiny_demo(tmp_path, "a")
    b = run_tiny_demo(tmp_path, "b")
    names = sorted(p.name for p in a.iterdir() if p.suffix in (".obj", ".csv", ".txt", ".lctg", ".json"))
    assert "metrics.csv" in names and "human.obj" in names and "object.obj" in names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    rows = (a / "metrics.csv").read_text().splitlines()
    assert len(rows) > 1
    assert np.isfinite([float(r.split(",")[1]) for r in rows[1:]]).all()
