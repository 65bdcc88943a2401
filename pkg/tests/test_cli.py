import json
import re

import numpy as np
import pytest

from avdub.cli import main
from avdub.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from avdub.experiments import file_sha256, load_model
from avdub.plots import plot_offset_curve

SMALL = {
    "corpus": {"n_train": 60, "n_test": 6},
    "sync_expert": {"steps": 20},
    "translator": {"steps": 5, "finetune_steps": 2},
    "duration": {"pretrain_steps": 5, "steps": 10, "accumulation": 2},
    "eval": {"plots": 2},
    "seeds": [0],
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small corpus plus one checkpoint per stage, produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(root / "corpus")]) == 0
    for stage in ("sync", "translator", "duration-pretrain"):
        assert main(["train", "--stage", stage, "--config", str(cfg), "--corpus", str(root / "corpus"),
                     "--out", str(root / "models")]) == 0
    return root, cfg


# ---------------------------------------------------------------- config

def test_config_defaults_round_trip():
    cfg = ExperimentConfig()
    assert config_from_dict(json.loads(cfg.to_json())).to_json() == cfg.to_json()
    assert cfg.to_dict()["duration"]["lambda"] == 10.0


@pytest.mark.parametrize("raw", [
    {"colour": 1}, {"corpus": {"size": 3}}, {"duration": {"lambda": "ten"}}, {"seeds": []},
    {"duration": {"lambda": -1}}, {"eval": {"duration_mode": "loose"}}, {"corpus": {"vocab_size": 7}},
])
def test_config_rejects_bad_input(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_env_seed_override():
    assert load_config(None, env={"AVS2S_SEED": "5"}).seeds == [5]
    assert load_config(None, env={}).seeds == [0, 1, 2]
    with pytest.raises(ConfigError):
        load_config(None, env={"AVS2S_SEED": "x"})


# ---------------------------------------------------------------- commands

def test_default_corpus_sizes_and_determinism(tmp_path):
    assert main(["gen-corpus", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-corpus", "--out", str(tmp_path / "b")]) == 0
    for name in ("train.jsonl", "test.jsonl", "pair.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    train = (tmp_path / "a" / "train.jsonl").read_text().splitlines()
    test = (tmp_path / "a" / "test.jsonl").read_text().splitlines()
    assert len(train) == 2000 and len(test) == 200
    ids = lambda lines: {json.loads(x)["id"] for x in lines}  # noqa: E731
    assert not ids(train) & ids(test)


def test_stage_outputs_and_manifest(workspace):
    root, _ = workspace
    models = root / "models"
    for name in ("sync", "translator", "duration_pretrain"):
        assert (models / f"{name}.ckpt").exists()
        assert (models / f"{name}_loss.csv").read_text().startswith("step,loss")
    manifest = json.loads((models / "MANIFEST.json").read_text())
    assert manifest["status"] == "ok"
    for rel, digest in manifest["files"].items():
        assert file_sha256(models / rel) == digest
    resolved = json.loads((models / "config.json").read_text())
    assert resolved["sync_expert"]["steps"] == 20 and resolved["output_dir"] == str(models)


def test_seed_flag_changes_checkpoint(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--stage", "sync", "--config", str(cfg), "--corpus", str(root / "corpus"),
                 "--out", str(tmp_path), "--seed", "5", "--no-plots"]) == 0
    assert file_sha256(tmp_path / "sync.ckpt") != file_sha256(root / "models" / "sync.ckpt")


def test_usage_errors_exit_2(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["train", "--stage", "sync", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    assert "corpus not found" in capsys.readouterr().err
    assert main(["finetune", "--config", str(cfg), "--corpus", str(root / "corpus"), "--losses", "sync",
                 "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"corpus": {"n_train": 10, "extra": 1}}')
    assert main(["gen-corpus", "--config", str(bad), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--stage", "bogus"])
    assert e.value.code == 2


def test_runtime_failure_exits_3_with_manifest(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**SMALL, "corpus": {"n_train": 10, "n_test": 2}}))
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "corpus")]) == 0
    out = tmp_path / "run"
    out.mkdir()
    assert main(["train", "--stage", "sync", "--config", str(cfg), "--corpus", str(tmp_path / "corpus"),
                 "--out", str(out)]) == 3
    manifest = json.loads((out / "MANIFEST.json").read_text())
    assert manifest["status"] == "failed" and "too small" in manifest["error"]


def test_finetune_lambda_zero_equals_sync_only(workspace, tmp_path):
    root, cfg = workspace
    common = ["finetune", "--config", str(cfg), "--corpus", str(root / "corpus"), "--steps", "10",
              "--init-checkpoint", str(root / "models" / "duration_pretrain.ckpt"),
              "--expert", str(root / "models" / "sync.ckpt"), "--no-plots"]
    assert main(common + ["--losses", "sync+dur", "--lambda", "0", "--out", str(tmp_path / "a")]) == 0
    assert main(common + ["--losses", "sync_only", "--out", str(tmp_path / "b")]) == 0
    a = load_model(tmp_path / "a" / "duration_finetuned.ckpt")
    b = load_model(tmp_path / "b" / "duration_finetuned.ckpt")
    assert a.meta["losses"] == "sync+dur" and a.meta["lambda"] == 0.0
    for k in a.params:
        np.testing.assert_allclose(a.params[k], b.params[k], rtol=0, atol=1e-12)


def test_evaluate_outputs(workspace, tmp_path):
    root, cfg = workspace
    args = ["evaluate", "--config", str(cfg), "--corpus", str(root / "corpus"), "--system", "pre",
            "--expert", str(root / "models" / "sync.ckpt"),
            "--translator", str(root / "models" / "translator.ckpt"),
            "--duration", str(root / "models" / "duration_pretrain.ckpt")]
    assert main(args + ["--report", str(tmp_path / "r" / "pre.json")]) == 0
    report = json.loads((tmp_path / "r" / "pre.json").read_text())
    assert report["schema"] == "avs2s-report-v1" and len(report["samples"]) + len(report["failures"]) == 6
    assert (tmp_path / "r" / "pre.md").read_text().startswith("| | pre (seed 0) |")
    svgs = sorted((tmp_path / "r" / "plots").glob("*.svg"))
    assert len(svgs) >= 1
    assert main(args + ["--report", str(tmp_path / "q" / "pre.json"), "--no-plots"]) == 0
    assert not (tmp_path / "q" / "plots").exists()
    assert (tmp_path / "q" / "pre.json").read_bytes() == (tmp_path / "r" / "pre.json").read_bytes()
    assert main(["report", str(tmp_path / "r" / "pre.json"), "--out", str(tmp_path / "t.md")]) == 0
    assert "length drift" in (tmp_path / "t.md").read_text()


def test_offset_plot_range_and_determinism(tmp_path):
    curve = np.linspace(1, 2, 31)
    assert plot_offset_curve(curve, tmp_path / "a.svg", max_offset=15) == (-15.0, 15.0)
    plot_offset_curve(curve, tmp_path / "b.svg", max_offset=15)
    a = (tmp_path / "a.svg").read_text()
    assert a == (tmp_path / "b.svg").read_text()
    assert not re.search(r"<dc:date>", a)
