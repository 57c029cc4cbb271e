from __future__ import annotations

import json

import numpy as np
import pytest

from cachesae.cli import main
from cachesae.config import ExperimentConfig, load_config
from cachesae.errors import ConfigError
from cachesae.pipeline import read_jsonl, stage_plan
from cachesae.report import audit

from conftest import DEMO_CONFIG

TINY = {
    "name": "tiny", "seed": 0,
    "host": {"write_rule": "gated_delta", "n_layers": 1, "n_heads": 2, "d_k": 4, "d_v": 4,
             "d_model": 16, "vocab_size": 24, "budget": 15, "train": {"batch": 8, "warmup": 2}},
    "corpus": {"n_seq": 40, "length": 16, "train_seqs": 20, "grammar": {"vocab_size": 24}},
    "capture": {"cell": [0, 1]},
    "sae": {"n_features": 8, "sparsity": {"kind": "topk", "k": 2},
            "train": {"epochs": 2, "batch": 32, "k_aux": 4, "renorm_every": 5,
                      "resample_every": 10, "inactivity": 5, "warmup": 2}},
    "experiments": {"partition": {"gmm_restarts": 2},
                    "replacement": {"cap_per_feature": 5, "max_firings": 20, "resamples": 50}},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_config_roundtrip_and_hash():
    cfg = load_config(DEMO_CONFIG)
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert cfg.experiment("steer")["doses"] == [1.5, 3.0, 6.0]
    assert stage_plan(cfg, "replacement") == ["train-host", "capture", "train-sae", "partition",
                                              "replace", "report"]


@pytest.mark.parametrize("patch", [
    {"bogus": 1},
    {"experiments": {"nope": {}}},
    {"experiments": {"partition": {"tau2": 0.1}}},
    {"capture": {"cell": [5, 0]}},
    {"sae": {"variant": "gated"}},
    {"corpus": {"n_seq": 10, "train_seqs": 20}},
])
def test_bad_configs_raise(patch):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**TINY, **patch})


def test_dry_run_prints_plan(tiny_config, capsys):
    assert main(["run", str(tiny_config), "--dry-run", "--out", "x"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["stages"][0] == "train-host" and plan["output"] == "x"
    assert len(plan["config_hash"]) == 64


def test_exit_codes(tmp_path, tiny_config):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == 2
    assert main(["train-sae", str(tiny_config), "--out", str(tmp_path / "empty")]) == 4
    # a failed stage leaves its marker so partial outputs are recognisable
    assert (tmp_path / "empty" / "train-sae.partial").exists()


def test_stage_by_stage_run(tiny_config, tmp_path):
    out = tmp_path / "run"
    for stage in ("train-host", "capture", "train-sae", "partition", "replace"):
        assert main([stage, str(tiny_config), "--out", str(out)]) == 0, stage
        assert not (out / f"{stage}.partial").exists()
    assert main(["report", str(tiny_config), "--out", str(out)]) == 0
    assert (out / "manifest.json").exists() and (out / "summary.json").exists()
    assert main(["audit", str(out)]) == 0
    rows = read_jsonl(out / "geometry.jsonl")
    assert len(rows) == 8 and {r["class"] for r in rows} <= {"register", "bundle", "null"}


def test_audit_flags_tampering(tiny_config, tmp_path):
    out = tmp_path / "run"
    assert main(["run", str(tiny_config), "--out", str(out)]) == 0
    assert audit(out) == []
    rep = json.loads((out / "replacement.json").read_text())
    rep["win_rate"] = float(np.clip(rep["win_rate"] + 0.1, 0, 2))
    (out / "replacement.json").write_text(json.dumps(rep))
    assert any("win_rate" in m for m in audit(out))
    assert main(["audit", str(out)]) == 4
