"""Experiment configuration: a JSON document with one section per stage.

Schema (all sections optional except ``host``; missing keys take defaults)::

    {
      "name": str,                      # run label
      "seed": int,                      # master seed
      "output": str,                    # run directory
      "host": {HostConfig fields..., "budget": int, "train": {HostTrainConfig fields}},
      "corpus": {"n_seq": int, "length": int, "seed": int, "train_seqs": int,
                 "grammar": {Grammar fields}},
      "capture": {"cell": "auto" | [layer, head], "split_seed": int},
      "sae": {"variant": str, "n_features": int,
              "sparsity": {"kind": str, "k": int, "theta": float},
              "train": {TrainConfig fields}},
      "experiments": {"partition": {...}, "replacement": {...}, "predict": {...},
                      "steer": {...}}
    }
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .corpus import Grammar
from .errors import ConfigError
from .hosts import HostConfig, HostTrainConfig
from .sae import VARIANTS, SparsityRule, TrainConfig

EXPERIMENTS = ("partition", "replacement", "predict", "steer")


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    for k, v in data.items():
        if isinstance(v, list):
            data[k] = tuple(v)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class CorpusSpec:
    n_seq: int = 600
    length: int = 64
    seed: int = 0
    train_seqs: int = 450        # host trains on the first block, captures use the rest
    grammar: Grammar = field(default_factory=Grammar)

    def __post_init__(self):
        if not 0 < self.train_seqs < self.n_seq:
            raise ConfigError("corpus.train_seqs must lie strictly inside (0, n_seq)")
        if self.length < 8:
            raise ConfigError("corpus.length must be at least 8")


@dataclass(frozen=True)
class SAESpec:
    variant: str = "rank1"
    n_features: int = 64
    sparsity: SparsityRule = field(default_factory=lambda: SparsityRule("topk", 4))
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"sae.variant must be one of {sorted(VARIANTS)}")
        if self.n_features < 1:
            raise ConfigError("sae.n_features must be positive")


_EXPERIMENT_DEFAULTS: dict[str, dict[str, Any]] = {
    "partition": {"tau": 0.05, "taus": [0.02, 0.03, 0.05, 0.10], "gmm_restarts": 10},
    "replacement": {"cap_per_feature": 30, "max_firings": 1000, "horizon": None,
                    "matched_norm": False, "resamples": 1000},
    "predict": {"n_fits": 40, "eps": 0.1, "horizon": 0, "readout": "jacobian"},
    "steer": {"eval_horizon": 0, "n_features": 4, "firings_per_feature": 15, "install_magnitudes": [1.0, 2.0, 4.0],
              "install_positions": 30, "sign_trials": 100, "sign_eps": 1e-3,
              "doses": [1.5, 3.0, 6.0], "positions": 3, "horizon": 20, "n_prompts": 100,
              "prompt_length": 24, "amplify_doses": [2.0, 5.0, 10.0], "amplify_prompts": 40,
              "marker": 0},
}


@dataclass(frozen=True)
class ExperimentConfig:
    host: HostConfig
    host_budget: int = 300
    host_train: HostTrainConfig = field(default_factory=HostTrainConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    cell: tuple[int, int] | None = None    # None: lowest mean forget gate
    split_seed: int = 0
    sae: SAESpec = field(default_factory=SAESpec)
    experiments: dict[str, dict[str, Any]] = field(default_factory=dict)
    name: str = "run"
    seed: int = 0
    output: str = "runs/run"

    def __post_init__(self):
        exps = {}
        for name, params in self.experiments.items():
            if name not in EXPERIMENTS:
                raise ConfigError(f"unknown experiment {name!r}")
            unknown = set(params or {}) - set(_EXPERIMENT_DEFAULTS[name])
            if unknown:
                raise ConfigError(f"experiments.{name}: unknown keys {sorted(unknown)}")
            exps[name] = {**_EXPERIMENT_DEFAULTS[name], **(params or {})}
        object.__setattr__(self, "experiments", exps)
        if self.host_budget < 1:
            raise ConfigError("host.budget must be positive")
        if self.cell is not None:
            layer, head = self.cell
            if not (0 <= layer < self.host.n_layers and 0 <= head < self.host.n_heads):
                raise ConfigError(f"capture.cell {self.cell} outside the host")
        if self.host.vocab_size != self.corpus.grammar.vocab_size:
            raise ConfigError("host.vocab_size must equal corpus.grammar.vocab_size")

    # -- (de)serialization --------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "host" not in data:
            raise ConfigError("config needs a 'host' section")
        host = dict(data.pop("host"))
        budget = host.pop("budget", 300)
        host_train = _build(HostTrainConfig, host.pop("train", None), "host.train")
        try:
            host_cfg = HostConfig.from_dict(host)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"host: {exc}") from exc
        corpus = dict(data.pop("corpus", {}) or {})
        grammar = _build(Grammar, corpus.pop("grammar", None), "corpus.grammar")
        corpus_spec = _build(CorpusSpec, {**corpus, "grammar": grammar}, "corpus")
        cap = dict(data.pop("capture", {}) or {})
        cell = cap.pop("cell", "auto")
        split_seed = cap.pop("split_seed", 0)
        if cap:
            raise ConfigError(f"capture: unknown keys {sorted(cap)}")
        if cell == "auto" or cell is None:
            cell = None
        else:
            if not (isinstance(cell, (list, tuple)) and len(cell) == 2):
                raise ConfigError("capture.cell must be 'auto' or [layer, head]")
            cell = (int(cell[0]), int(cell[1]))
        sae = dict(data.pop("sae", {}) or {})
        sp = _build(SparsityRule, sae.pop("sparsity", {"kind": "topk", "k": 4}), "sae.sparsity")
        tc = _build(TrainConfig, sae.pop("train", None), "sae.train")
        sae_spec = _build(SAESpec, {**sae, "sparsity": sp, "train": tc}, "sae")
        exps = data.pop("experiments", {}) or {}
        top = {k: data.pop(k) for k in ("name", "seed", "output") if k in data}
        if data:
            raise ConfigError(f"unknown top-level keys {sorted(data)}")
        return cls(host_cfg, budget, host_train, corpus_spec, cell, split_seed, sae_spec,
                   {k: dict(v or {}) for k, v in exps.items()}, **top)

    def to_dict(self) -> dict:
        host = self.host.to_dict()
        host["budget"] = self.host_budget
        host["train"] = _plain(asdict(self.host_train))
        corpus = _plain(asdict(self.corpus))
        return {
            "name": self.name,
            "seed": self.seed,
            "output": self.output,
            "host": host,
            "corpus": corpus,
            "capture": {"cell": "auto" if self.cell is None else list(self.cell),
                        "split_seed": self.split_seed},
            "sae": _plain(asdict(self.sae)),
            "experiments": _plain(self.experiments),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def experiment(self, name: str) -> dict[str, Any] | None:
        return self.experiments.get(name)

    def with_output(self, output: str | Path) -> "ExperimentConfig":
        d = self.to_dict()
        d["output"] = str(output)
        return ExperimentConfig.from_dict(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(data)
