import json

import numpy as np
import pytest

from umark import cli, config, pipeline, segnet
from umark.embed import NonFiniteLoss
from umark.synthdata import ConfigError


def _tiny(tmp_path, **embed):
    d = {
        "dataset": {"n_train": 12, "n_val": 10, "n_test": 4},
        "embed": {"epochs": 1, **embed},
        "verify": {"probe_count": 2},
        "ablation": {"train_count": 8, "epochs": 1, "probes": 2},
        "out_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return path


def test_dumps_seventeen_digits():
    assert config.dumps(0.1) == "0.10000000000000001"
    assert config.dumps(1.0) == "1.0"
    assert config.dumps(float("nan")) == "null"
    for x in np.random.default_rng(0).normal(size=50):
        assert float(config.dumps(float(x))) == x
    assert json.loads(config.dumps({"a": [1, 2.5], "b": {"c": True, "d": None}})) == {
        "a": [1, 2.5], "b": {"c": True, "d": None}
    }


def test_config_roundtrip_and_hash():
    cfg = config.ExperimentConfig()
    back = config.ExperimentConfig.from_dict(json.loads(config.dumps(cfg.to_dict())))
    assert back == cfg and back.sha256() == cfg.sha256()


@pytest.mark.parametrize(
    "d",
    [
        {"bogus": 1},
        {"grid_size": 7},
        {"trigger": {"kind": "patch", "size": 4, "row": 62, "col": 2, "seed": 0, "intensity": 1.0}},
        {"verify": {"probe_count": 0}},
        {"embed": {"delta": 0.7}},
        {"dataset": {"image_size": 32}},
    ],
)
def test_config_rejects(d):
    with pytest.raises(ConfigError):
        config.ExperimentConfig.from_dict(d)


def test_usage_errors(tmp_path, capsys):
    cfg = _tiny(tmp_path)
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["train"]) == cli.EXIT_USAGE
    assert cli.main(["verify", "--config", str(cfg), "--probes", "0"]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text('{"grid_size": 7}')
    assert cli.main(["gen", "--config", str(bad)]) == cli.EXIT_USAGE
    assert "umark:" in capsys.readouterr().err


def test_io_errors(tmp_path):
    cfg = _tiny(tmp_path)
    assert cli.main(["gen", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_IO
    junk = tmp_path / "junk.smk"
    junk.write_bytes(b"NOPE" + b"\0" * 20)
    assert cli.main(["verify", "--config", str(cfg), "--model", str(junk), "--quiet"]) == cli.EXIT_IO


def test_numeric_failure_exit(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteLoss(0)

    monkeypatch.setattr(pipeline, "train", boom)
    assert cli.main(["train", "--config", str(_tiny(tmp_path)), "--quiet"]) == cli.EXIT_NUMERIC


def test_gen_manifest_and_noop(tmp_path):
    cfg = _tiny(tmp_path)
    assert cli.main(["gen", "--config", str(cfg), "--export", "--quiet"]) == 0
    man = tmp_path / "out" / "dataset.json"
    data = json.loads(man.read_text())
    assert data["counts"] == {"train": 12, "val": 10, "test": 4}
    assert data["triggered"] == {"train": 6, "val": 5, "test": 2}
    assert (tmp_path / "out" / "images" / "train" / "00000.pgm").exists()
    assert (tmp_path / "out" / "grid.pbm").exists()
    stamp = man.stat().st_mtime_ns
    assert cli.main(["gen", "--config", str(cfg), "--quiet"]) == 0
    assert man.stat().st_mtime_ns == stamp


@pytest.mark.filterwarnings("ignore::umark.verify.DegenerateDataWarning")
def test_train_zero_lr_reproduces_init(tmp_path):
    cfg = _tiny(tmp_path, learning_rate=0.0)
    model = tmp_path / "m.smk"
    assert cli.main(["train", "--config", str(cfg), "--model", str(model), "--quiet"]) == 0
    loaded = segnet.load_params(model)
    init = segnet.init_params(config.load_config(cfg).embed.seed)
    assert segnet.dumps_params(loaded) == segnet.dumps_params(init)
    log = json.loads(model.with_suffix(".trainlog.json").read_text())
    assert {"base_loss", "constraint_loss", "total_loss"} <= set(log["epochs"][0])
    assert model.with_suffix(".detector.json").exists()


@pytest.mark.filterwarnings("ignore::umark.verify.DegenerateDataWarning")
def test_pipeline_end_to_end_tiny(tmp_path):
    cfg = _tiny(tmp_path)
    out = tmp_path / "out"
    base = ["--config", str(cfg), "--quiet"]
    assert cli.main(["train", *base]) == 0
    first = segnet.params_digest(segnet.load_params(out / "watermark.smk"))
    assert cli.main(["train", *base]) == 0
    assert segnet.params_digest(segnet.load_params(out / "watermark.smk")) == first
    assert cli.main(["verify", *base]) == 0
    rep = json.loads((out / "verify_watermark.json").read_text())
    assert rep["probes"] == 2 and len(rep["reports"]) == 2
    assert set(rep["reports"][0]) == {"decision", "score", "p_value", "grid", "match", "degenerate",
                                       "model_sha256", "config_sha256", "seed"}
    assert cli.main(["attack", *base, "--kind", "prune"]) == 0
    att = json.loads((out / "attack_watermark.json").read_text())
    rows = att["pruning"]
    assert len(rows) == 4 and rows[0]["setting"]["ratio"] == 0.0
    assert rows[0]["asr"] == att["baseline_asr"] and rows[0]["delta_asr"] == 0.0
    assert cli.main(["attack", *base, "--kind", "sideways"]) == cli.EXIT_USAGE
    assert cli.main(["report", *base]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert {"verify_watermark", "attack_watermark"} <= set(summary["artifacts"])
