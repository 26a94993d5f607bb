import json
import os

import numpy as np
import pytest
import yaml

from domainmap import cli
from domainmap import datasets as ds
from domainmap import pipeline as pl
from domainmap.config import PRESETS, ConfigError, load_run_config, parse_run_config
from domainmap.degradation import BicubicDown, Blur, Noise
from domainmap.models import Model, ModelConfig
from domainmap.trainer import NumericError, checkpoint_from, load_checkpoint

TINY_MODEL = {"n_groups": 1, "n_blocks_per_group": 1, "channels": 8, "reduction": 2}
BASE = {
    "corpus": {"synth": {"n": 4, "size": 64, "seed": 0}, "n_test": 1},
    "degradations": {
        "down4": [{"bicubic_down": 4}],
        "down2": [{"bicubic_down": 2}],
        "b9n": [{"blur": 9}, {"noise": 40}],
        "flat": [],
        "unknown": [{"blur": {"size": 7, "sigma": 1.2}}, {"bicubic_down": 4}, {"noise": {"target_psnr_db": 45, "seed": 2}}],
    },
    "models": {"desk": TINY_MODEL},
    "training": {"defaults": {"total_iters": 2, "patch_size": 8, "batch_size": 2}},
}


def write_cfg(tmp_path, doc, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


@pytest.fixture
def gt_dir(tmp_path):
    d = tmp_path / "gt"
    ds.save_records(ds.synth_corpus(2, 64, 5), str(d))
    return str(d)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


# ---- config parsing


def test_config_parses_steps():
    cfg = parse_run_config(BASE)
    assert cfg.spec("unknown").steps == (Blur(7, 1.2), BicubicDown(4), Noise(45, 2))
    assert cfg.spec("flat").steps == ()
    assert cfg.model_config(scale=2).channels == 8
    assert cfg.train_config().total_iters == 2


@pytest.mark.parametrize("doc,fragment", [
    ({"corpus": {"synth": {"n": 4}, "extra": 1}}, "corpus: unknown key"),
    ({"training": {"defaults": {"learning_rate": 1}}}, "training.defaults: unknown key"),
    ({"models": {"m": {"width": 3}}}, "models.m: unknown key"),
    ({"degradations": {"x": [{"sharpen": 2}]}}, "unknown step kind"),
    ({"degradations": {"x": [{"blur": 8}]}}, "invalid blur"),
    ({"experiment": {"kind": "sr", "model": "nope"}}, "experiment.model"),
    ({"experiment": {"kind": "sr"}}, "unknown degradation 'unknown'"),
    ({"experiment": {"kind": "restore", "branches": ["Direct4"]}}, "not a restore branch"),
    ({"experiment": {"kind": "video"}}, "kind"),
    ({"surprise": {}}, "config: unknown key"),
])
def test_config_rejects(doc, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_run_config(doc)


def test_presets_parse():
    for name, doc in PRESETS.items():
        cfg = parse_run_config(doc)
        assert cfg.experiment.branch_list
    assert parse_run_config(PRESETS["sr-desk"]).experiment.branch_list == list(pl.SR_BRANCHES)
    assert parse_run_config(PRESETS["restore-desk"]).experiment.kind == "restore"


def test_file_overrides_preset(tmp_path):
    path = write_cfg(tmp_path, {"training": {"defaults": {"total_iters": 7}}})
    cfg = load_run_config(path, PRESETS["restore-desk"])
    assert cfg.train_config().total_iters == 7 and cfg.train_config().patch_size == 32


def test_bad_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("corpus: [unclosed")
    with pytest.raises(ConfigError, match="YAML"):
        load_run_config(str(p))


# ---- commands


def test_help_lists_every_branch(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out.replace("\n", " ")
    for b in pl.BRANCHES:
        assert b in text
    code, out, _ = run(capsys, "branches")
    assert code == 0 and out.split() == list(pl.BRANCHES)


def test_degrade_identity_and_down4(tmp_path, gt_dir, capsys):
    cfg = write_cfg(tmp_path, BASE)
    code, out, _ = run(capsys, "--config", cfg, "--out", str(tmp_path / "id"), "degrade", "--spec", "identity",
                       "--in", gt_dir)
    assert code == 0 and json.loads(out)["images"] == 2
    for name in ("synth5_0000", "synth5_0001"):
        np.testing.assert_array_equal(ds.read_png(f"{tmp_path}/id/{name}.png"), ds.read_png(f"{gt_dir}/{name}.png"))
    code, _, _ = run(capsys, "--config", cfg, "--out", str(tmp_path / "d4"), "degrade", "--spec", "down4", "--in", gt_dir)
    assert code == 0 and ds.read_png(f"{tmp_path}/d4/synth5_0000.png").shape == (3, 16, 16)


def test_degrade_is_byte_identical(tmp_path, gt_dir, capsys):
    cfg = write_cfg(tmp_path, BASE)
    for d in ("r1", "r2"):
        assert run(capsys, "--config", cfg, "--out", str(tmp_path / d), "degrade", "--spec", "b9n", "--in", gt_dir)[0] == 0
    for f in sorted(os.listdir(tmp_path / "r1")):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()


def test_degrade_missing_spec_lists_names(tmp_path, gt_dir, capsys):
    code, _, err = run(capsys, "--config", write_cfg(tmp_path, BASE), "degrade", "--spec", "nope", "--in", gt_dir)
    line = json.loads(err.strip().splitlines()[-1])
    assert code == 2 and line["error"] == "config" and "b9n, down2, down4" in line["message"]


def test_unknown_config_key_exits_2_before_output(tmp_path, gt_dir, capsys):
    cfg = write_cfg(tmp_path, dict(BASE, extra={"x": 1}))
    out_dir = tmp_path / "never"
    code, _, err = run(capsys, "--config", cfg, "--out", str(out_dir), "degrade", "--spec", "down4", "--in", gt_dir)
    assert code == 2 and json.loads(err)["exit_code"] == 2 and not out_dir.exists()


def test_train_zero_iters_matches_fresh_build(tmp_path, capsys):
    doc = dict(BASE, training={"defaults": {"total_iters": 0, "patch_size": 8}})
    code, out, _ = run(capsys, "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path), "train",
                       "--input-spec", "down2")
    assert code == 0
    fresh = checkpoint_from(Model(ModelConfig(scale=2, **TINY_MODEL), seed=0), None, 0, None)
    assert json.loads(out)["digest"] == fresh.digest() == load_checkpoint(str(tmp_path / "model.ckpt")).digest()


def test_train_then_sr_scale2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE)
    assert run(capsys, "--config", cfg, "--out", str(tmp_path), "train", "--input-spec", "down2", "--name", "x2")[0] == 0
    lr = tmp_path / "lr"
    small = ds.degrade_records(ds.synth_corpus(1, 64, 1), parse_run_config(BASE).spec("down4"))[0]
    ds.save_records([ds.ImageRecord("p", small.pixels, "")], str(lr))
    code, out, _ = run(capsys, "--out", str(tmp_path / "sr"), "sr", "--checkpoint", str(tmp_path / "x2.ckpt"),
                       "--in", str(lr), "--scale", "2")
    assert code == 0 and ds.read_png(str(tmp_path / "sr" / "p.png")).shape == (3, 32, 32)
    code, _, err = run(capsys, "--out", str(tmp_path / "bad"), "sr", "--checkpoint", str(tmp_path / "x2.ckpt"),
                       "--in", str(lr), "--scale", "4")
    assert code == 2 and "task scale 4" in json.loads(err)["message"]
    code, _, _ = run(capsys, "--out", str(tmp_path / "bad"), "restore", "--checkpoint", str(tmp_path / "x2.ckpt"),
                     "--in", str(lr))
    assert code == 2 and not (tmp_path / "bad").exists()


def test_map_command_writes_checkpoint(tmp_path, capsys):
    code, out, _ = run(capsys, "--config", write_cfg(tmp_path, BASE), "--out", str(tmp_path), "map",
                       "--from", "unknown", "--to", "down2")
    info = json.loads(out)
    assert code == 0 and info["scale"] == 2 and info["target_domain"] == "bicubic_down2"
    code, _, _ = run(capsys, "--config", write_cfg(tmp_path, BASE), "--out", str(tmp_path), "map",
                     "--from", "down2", "--to", "unknown")
    assert code == 2


def test_eval_identical_dirs(tmp_path, gt_dir, capsys):
    code, out, _ = run(capsys, "--out", str(tmp_path / "ev"), "eval", "--pred", gt_dir, "--gt", gt_dir)
    assert code == 0 and "psnr_mean_db=inf" in out and "ssim_mean=1.0" in out
    rows = (tmp_path / "ev" / "eval.csv").read_text().splitlines()
    assert rows[1].split(",")[3:5] == ["inf", "1.0"]


def test_numeric_failure_exit_3(tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite loss at iteration 0")

    monkeypatch.setattr(cli, "train", boom)
    code, _, err = run(capsys, "--config", write_cfg(tmp_path, BASE), "--out", str(tmp_path), "train",
                       "--input-spec", "down2")
    assert code == 3 and json.loads(err)["error"] == "numeric"


def experiment_doc(**exp):
    doc = dict(BASE, transfer_corpus={"synth": {"n": 1, "size": 64, "seed": 3}, "n_test": 1})
    doc["experiment"] = dict({"kind": "sr", "unknown": "unknown", "transfer_unknown": "unknown"}, **exp)
    return doc


def test_experiment_csv_is_deterministic(tmp_path, capsys):
    cfg = write_cfg(tmp_path, experiment_doc(branches=["Direct4", "Mapping2x_Specialized2"]))
    for d in ("e1", "e2"):
        code, out, _ = run(capsys, "--config", cfg, "--out", str(tmp_path / d), "experiment")
        assert code == 0
    for f in ("report.csv", "summary.csv", "summary.md", "psnr_by_branch.png", "loss_curves.png"):
        assert (tmp_path / "e1" / f).read_bytes() == (tmp_path / "e2" / f).read_bytes(), f
    summary = (tmp_path / "e1" / "summary.csv").read_text().splitlines()
    assert [r.split(",")[:2] for r in summary[1:]] == [
        ["Direct4", "A"], ["Direct4", "B-transfer"], ["Mapping2x_Specialized2", "A"],
        ["Mapping2x_Specialized2", "B-transfer"], ["Bicubic4", "A"], ["Bicubic4", "B-transfer"]]


def test_experiment_partial_failure_exit_4(tmp_path, capsys):
    doc = experiment_doc(branches=["Direct4", "Mapping2x_OffShelf2"])
    doc["training"]["roles"] = {"offshelf": {"patch_size": 40}}
    code, out, err = run(capsys, "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path / "e"), "experiment",
                         "--no-figures")
    assert code == 4 and json.loads(err)["error"] == "partial"
    assert "Mapping2x_OffShelf2" in json.loads(out.strip().splitlines()[-1])["failed"]
    assert "Direct4,A" in (tmp_path / "e" / "summary.csv").read_text()


def test_experiment_branch_flag_validated(tmp_path, capsys):
    code, _, err = run(capsys, "--config", write_cfg(tmp_path, experiment_doc()), "--out", str(tmp_path / "x"),
                       "experiment", "--branches", "Restore_Direct")
    assert code == 2 and not (tmp_path / "x").exists()


def test_unknown_preset(tmp_path, capsys):
    code, _, err = run(capsys, "--out", str(tmp_path / "x"), "experiment", "--preset", "table9")
    assert code == 2 and "sr-desk" in json.loads(err)["message"]
