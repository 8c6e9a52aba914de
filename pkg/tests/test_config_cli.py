import json

import numpy as np
import pytest

from voxelforge import cli
from voxelforge.config import PipelineConfig
from voxelforge.errors import ConfigError
from voxelforge.voxel import load_grid

SMALL = {"dcvae": {"epochs": 2, "encoder_widths": [64, 16], "branch_widths": [4, 8]},
         "fnet": {"epochs": 5, "hidden": [8, 8]}, "sweep": {"q": 12}}


def test_defaults_and_overrides():
    cfg = PipelineConfig()
    assert cfg.dims.shape == (12, 16, 14) and cfg.sweep["q"] == 100
    dc = cfg.dcvae_config("fc-baseline", seed=4)
    assert dc.mode == "fc-baseline" and dc.seed == 4 and dc.epochs == 200
    cfg = PipelineConfig({"dcvae": {"epochs": 3}, "seed": 9})
    assert cfg.dcvae_config().epochs == 3 and cfg.seed == 9
    assert PipelineConfig(cfg.to_dict()).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("doc", [{"dcvae": {"epoch": 3}}, {"bogus": 1}, {"sweep": {"p_min": 2.0}},
                                 {"dims": {"j_max": 0}}, {"schema": "other"}])
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigError):
        PipelineConfig(doc)


def test_unknown_key_names_path():
    with pytest.raises(ConfigError, match="dcvae"):
        PipelineConfig({"dcvae": {"latent": 3}})


def test_seed_precedence(monkeypatch):
    cfg = PipelineConfig({"seed": 5})
    args = type("A", (), {"seed": None})()
    monkeypatch.delenv("VOXELFORGE_SEED", raising=False)
    assert cli._seed(args, cfg) == 5
    monkeypatch.setenv("VOXELFORGE_SEED", "11")
    assert cli._seed(args, cfg) == 11
    args.seed = 2
    assert cli._seed(args, cfg) == 2


def test_bad_config_file_exit_code(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"nope": 1}))
    assert cli.main(["gen", "--n", "2", "--out", str(tmp_path / "d"), "--config", str(tmp_path / "c.json")]) == 2


def test_label_empty_dataset_exit_code(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["label", "--dataset", str(tmp_path / "empty"), "--out", str(tmp_path / "l.jsonl")]) == 2
    assert "error" in capsys.readouterr().err


def run_pipeline(root, n=40, seed=0, cfg=SMALL):
    root.mkdir(parents=True, exist_ok=True)
    c = root / "cfg.json"
    c.write_text(json.dumps(cfg))
    common = ["--config", str(c), "--seed", str(seed)]
    assert cli.main(["gen", "--n", str(n), "--out", str(root / "ds")] + common) == 0
    assert cli.main(["label", "--dataset", str(root / "ds"), "--out", str(root / "labels.jsonl")] + common) == 0
    assert cli.main(["train", "--dataset", str(root / "ds"), "--labels", str(root / "labels.jsonl"),
                     "--out", str(root / "model")] + common) == 0
    assert cli.main(["sweep", "--model", str(root / "model"), "--out", str(root / "sweep")] + common) == 0
    assert cli.main(["optimize", "--sweep", str(root / "sweep")] + common) == 0
    assert cli.main(["mesh", "--grid", str(root / "sweep" / "optimum.vxg"),
                     "--out", str(root / "opt.stl")] + common) == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    run_pipeline(root)
    return root


def test_pipeline_artifacts(pipeline, capsys):
    meta = json.loads((pipeline / "model" / "train.json").read_text())
    assert meta["schema"] == "voxelforge.train" and meta["dataset"] == "../ds"
    assert meta["n_train"] + meta["n_test"] <= 40
    sweep = json.loads((pipeline / "sweep" / "sweep.json").read_text())
    assert len(sweep["designs"]) == 12 and len(sweep["delta_m"]) == 11
    rep = json.loads((pipeline / "sweep" / "optimum_report.json").read_text())
    assert rep["schema"] == "voxelforge.optimum_report" and len(rep["conditions"]) == 9
    assert rep["opt_index"] >= 0.7 * 12
    assert (pipeline / "opt.stl").stat().st_size >= 84


def test_reconstruct_and_project(pipeline, capsys):
    capsys.readouterr()
    design = sorted((pipeline / "ds").rglob("*.vxg"))[0]
    out = pipeline / "rec.npy"
    assert cli.main(["reconstruct", "--model", str(pipeline / "model"), "--design", str(design),
                     "--out", str(out)]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert 0 <= rec["error_fraction"] <= 1
    assert np.load(out).shape == load_grid(design).dims.shape
    svg = pipeline / "lat.svg"
    assert cli.main(["project", "--latents", str(pipeline / "model" / "latents.jsonl"),
                     "--labels", str(pipeline / "labels.jsonl"), "--sweep", str(pipeline / "sweep"),
                     "--out", str(svg)]) == 0
    assert svg.read_text().startswith("<svg")


def test_train_is_reproducible(pipeline, tmp_path):
    c = pipeline / "cfg.json"
    args = ["train", "--dataset", str(pipeline / "ds"), "--labels", str(pipeline / "labels.jsonl"),
            "--config", str(c), "--seed", "0", "--out"]
    assert cli.main(args + [str(tmp_path / "again")]) == 0
    for name in ("model.nnp", "fnet.nnp", "history.csv", "latents.jsonl", "stats.json"):
        assert (tmp_path / "again" / name).read_bytes() == (pipeline / "model" / name).read_bytes()


def test_missing_model_exit_code(tmp_path):
    assert cli.main(["sweep", "--model", str(tmp_path / "none"), "--out", str(tmp_path / "s")]) == 2
