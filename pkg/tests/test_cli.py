import json
import time
from pathlib import Path

import pytest

from mcds.cli import main
from mcds.config import load_config
from mcds.errors import ValidationError

TINY = {
    "env": {"n_demos": 30},
    "encoder": {"mlp_hidden": 16, "d_model": 16, "depth": 1, "heads": 2, "t_context": 8},
    "cmcn": {"mlp_hidden": 16, "d_model": 16, "depth": 1, "heads": 2, "decoder_hidden": 16},
    "mhfp": {"mlp_hidden": 16, "d_model": 16, "depth": 1, "heads": 2, "decoder_hidden": 16},
    "train": {"iterations": 4, "batch_size": 4, "warmup": 1},
    "policy": {"width": 16, "iterations": 4, "batch_size": 8, "warmup": 1, "eval_episodes": 2,
               "sweep_lambdas": [0.0, 0.1], "sweep_layers": [0], "sweep_seeds": [0]},
    "analysis": {"cmi_samples": 1000, "diversity_samples": 200, "hierarchy_eps": [0.0, 0.2, 0.5],
                 "mine": {"iterations": 20, "restarts": 1}},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_unknown_key_rejected(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"iterationz": 3}}))
    code, _, err = _run(capsys, "gen-data", "--config", str(p), "--out-dir", str(tmp_path / "o"))
    assert code == 2
    msg = json.loads(err.strip())
    assert msg["error"] == "ValidationError" and "train.iterationz" in msg["message"]
    assert len(err.strip().splitlines()) == 1
    with pytest.raises(ValidationError):
        load_config(None, ["nope=1"])


def test_set_overrides_and_types():
    cfg = load_config(None, ["train.seed=7", "env.family=\"two-stage\"", "analysis.hierarchy_eps=[0.1,0.2]"])
    assert cfg.train.seed == 7 and cfg.env.family == "two-stage" and cfg.analysis.hierarchy_eps == [0.1, 0.2]
    with pytest.raises(ValidationError):
        load_config(None, ["train.iterations=1.5"])
    with pytest.raises(ValidationError):
        load_config(None, ["policy.concept_layer=5"])


def test_out_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("MCDS_OUT_DIR", str(tmp_path / "env-out"))
    assert load_config().path("dataset") == tmp_path / "env-out/data/dataset.mcds"


def test_missing_dataset_leaves_nothing(tmp_path, capsys, cfg_file):
    out = tmp_path / "o"
    code, _, err = _run(capsys, "train-concepts", "--config", str(cfg_file), "--out-dir", str(out))
    assert code == 4 and json.loads(err)["error"] == "FileNotFoundError"
    assert not out.exists() or not any(out.iterdir())


def test_fingerprint_refusal(tmp_path, capsys, cfg_file):
    out = str(tmp_path / "o")
    assert _run(capsys, "gen-data", "--config", str(cfg_file), "--out-dir", out)[0] == 0
    assert _run(capsys, "train-concepts", "--config", str(cfg_file), "--out-dir", out)[0] == 0
    code, _, err = _run(capsys, "label", "--config", str(cfg_file), "--out-dir", out, "--set", "train.lr=0.01")
    assert code == 3 and json.loads(err)["error"] == "FingerprintMismatch"
    assert not (Path(out) / "labels").exists()


def _pipeline(capsys, cfg_file, out):
    for cmd in ("gen-data", "train-concepts", "label", "train-policy", "eval", "sweep", "analyze"):
        code, stdout, err = _run(capsys, cmd, "--config", str(cfg_file), "--out-dir", str(out))
        assert code == 0, err
        assert json.loads(stdout)["ok"]


def test_pipeline_is_reproducible(tmp_path, capsys, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(capsys, cfg_file, a)
    _pipeline(capsys, cfg_file, b)
    csvs = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert {"eval/success.csv", "sweep/sweep.csv", "analysis/diversity.csv"} <= {str(p) for p in csvs}
    for rel in csvs:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert (a / "labels/labels.mccl").read_bytes() == (b / "labels/labels.mccl").read_bytes()
    for d in ("data", "concepts", "labels", "policy", "eval", "sweep", "analysis"):
        assert (a / d / "resolved_config.json").exists()
        prov = json.loads((a / d / "provenance.json").read_text())
        assert all(len(v["sha256"]) == 64 for v in prov["inputs"].values())
    summary = json.loads((a / "analysis/summary.json").read_text())
    assert set(summary) == {"similarity", "hierarchy", "diversity", "gallery", "cmi"}


def test_inputs_not_mutated(tmp_path, capsys, cfg_file):
    out = tmp_path / "o"
    _run(capsys, "gen-data", "--config", str(cfg_file), "--out-dir", str(out))
    before = (out / "data/dataset.mcds").read_bytes()
    _run(capsys, "train-concepts", "--config", str(cfg_file), "--out-dir", str(out))
    assert (out / "data/dataset.mcds").read_bytes() == before


def test_analyze_rejects_unknown_name(tmp_path, capsys):
    with pytest.raises(SystemExit):
        main(["analyze", "--which", "bogus"])


def test_default_pipeline_under_30_minutes(tmp_path, capsys):
    t = time.perf_counter()
    code, _, err = _run(capsys, "pipeline", "--out-dir", str(tmp_path / "run"))
    wall = time.perf_counter() - t
    assert code == 0, err
    stages = json.loads((tmp_path / "run/pipeline_times.json").read_text())
    assert set(stages) == {"gen-data", "train-concepts", "label", "train-policy", "eval", "analyze"}
    assert wall < 30 * 60, f"pipeline took {wall:.0f}s"
