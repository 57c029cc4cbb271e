"""Stage-sequential experiment pipeline.

Each stage reads its inputs from the run directory (so stages can be run one
at a time from the command line), writes its outputs, and drops a
``<stage>.partial`` marker that is removed only when the stage finishes.
Nothing written depends on wall-clock time, so a run is a pure function of
its config.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import stats
from .capture import CaptureDataset, center, capture_states, read_capture_file, write_capture_file
from .causal import (FiringRecord, Harness, find_firings, run_replacement_suite,
                     write_triples_jsonl)
from .config import ExperimentConfig
from .errors import CacheSAEError, ConfigError, NumericError
from .hosts import HostModel, forward, log_softmax, train_toy_host
from .partition import atom_geometry, delta_bic, tau_sweep, write_geometry_jsonl
from .predictor import fit_feature_sequence
from .sae import Dictionary, alive_features, read_dictionary, train_sae, val_mse, write_dictionary
from . import steer

log = logging.getLogger("cachesae")

STEER_PARTS = ("erase", "install", "sign", "generate", "amplify")
STAGES = ("train-host", "capture", "train-sae", "partition", "replace", "predict", "steer", "report")
_EXPERIMENT_STAGE = {"partition": "partition", "replacement": "replace", "predict": "predict",
                     "steer": "steer"}


class StageError(CacheSAEError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


class NumericStageError(StageError):
    pass


# ----------------------------------------------------------------------------
# small I/O helpers
# ----------------------------------------------------------------------------


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_jsonl(path: Path, rows) -> None:
    with path.open("w") as fh:
        for r in rows:
            fh.write(json.dumps(_clean(r), sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------------------
# run context
# ----------------------------------------------------------------------------


@dataclass
class Run:
    config: ExperimentConfig
    out: Path
    steer_parts: tuple[str, ...] = STEER_PARTS
    _cache: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        return self.out / name

    def corpus(self) -> np.ndarray:
        if "corpus" not in self._cache:
            c = self.config.corpus
            self._cache["corpus"] = c.grammar.sample(c.n_seq, c.length, c.seed)
        return self._cache["corpus"]

    def host(self) -> HostModel:
        if "host" not in self._cache:
            self._cache["host"] = HostModel.load(self.path("host.npz"))
        return self._cache["host"]

    def cell(self) -> tuple[int, int]:
        if "cell" not in self._cache:
            self._cache["cell"] = tuple(json.loads(self.path("capture.json").read_text())["cell"])
        return self._cache["cell"]

    def dataset(self) -> CaptureDataset:
        if "dataset" not in self._cache:
            self._cache["dataset"] = center(read_capture_file(self.path("capture.wsae"), self.cell()))
        return self._cache["dataset"]

    def dictionary(self) -> Dictionary:
        if "dict" not in self._cache:
            self._cache["dict"] = read_dictionary(self.path("sae.wsdc"))
        return self._cache["dict"]

    def harness(self, horizon=None, matched_norm=False) -> Harness:
        return Harness(self.host(), self.corpus(), self.config.seed, horizon, matched_norm)

    def classes(self) -> dict[int, str]:
        return {r["id"]: r["class"] for r in read_jsonl(self.path("geometry.jsonl"))}


def select_cell(model: HostModel, corpus) -> tuple[int, int]:
    """Cell with the lowest mean forget gate over ``corpus`` (ties: lowest index)."""
    means = np.mean([forward(model, s).alpha.mean(axis=0) for s in corpus], axis=0)
    flat = int(np.argmin(means))
    return divmod(flat, model.config.n_heads)


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------


def stage_train_host(run: Run) -> None:
    cfg = run.config
    corpus = run.corpus()[:cfg.corpus.train_seqs]
    model = train_toy_host(cfg.host, corpus, cfg.host_budget, cfg.host_train)
    model.save(run.path("host.npz"))
    write_json(run.path("host.json"), {"config": cfg.host.to_dict(), **model.meta})
    run._cache["host"] = model


def stage_capture(run: Run) -> None:
    cfg = run.config
    model = run.host()
    held = run.corpus()[cfg.corpus.train_seqs:]
    cell = cfg.cell if cfg.cell is not None else select_cell(model, held[:32])
    ds = capture_states(model, held, cell, cfg.split_seed, seq_offset=cfg.corpus.train_seqs)
    write_capture_file(ds, run.path("capture.wsae"))
    gates = ds.alpha
    write_json(run.path("capture.json"), {
        "cell": list(cell), "auto_cell": cfg.cell is None, "records": len(ds),
        "sequences": int(len(held)), "mean_alpha": float(gates.mean()),
        "mean_beta": float(ds.beta.mean()), "sha256": ds.sha256()})
    run._cache["cell"] = tuple(cell)
    run._cache.pop("dataset", None)


def stage_train_sae(run: Run) -> None:
    spec = run.config.sae
    ds = run.dataset()
    d, metrics = train_sae(ds, spec.n_features, spec.variant, spec.sparsity, spec.train)
    write_dictionary(d, run.path("sae.wsdc"))
    alive = alive_features(d, ds)
    fvu = val_mse(d, ds) / float(np.var(ds.states[ds.val_mask]))
    write_json(run.path("sae_metrics.json"), {**metrics.to_dict(), "fvu": fvu,
                                              "alive": int(alive.sum()), "n_features": d.n_f})
    run._cache["dict"] = d


def stage_partition(run: Run) -> None:
    p = run.config.experiment("partition") or {}
    ds, d = run.dataset(), run.dictionary()
    geoms = atom_geometry(d, ds, "val", tau=p.get("tau", 0.05))
    write_geometry_jsonl(geoms, run.path("geometry.jsonl"))
    cos = np.array([g.median_cos for g in geoms if g.cls != "null"])
    counts = {c: sum(g.cls == c for g in geoms) for c in ("register", "bundle", "null")}
    out = {"tau": p.get("tau", 0.05), "counts": counts,
           "tau_sweep": tau_sweep(geoms, p.get("taus", (0.02, 0.03, 0.05, 0.1))),
           "median_cos_alive": float(np.median(cos)) if len(cos) else None,
           "delta_bic": (delta_bic(cos, seed=run.config.seed, restarts=p.get("gmm_restarts", 10))
                         if len(cos) >= 6 else None),
           "bimodality": stats.bimodality_coefficient(cos) if len(cos) >= 4 else None}
    write_json(run.path("partition.json"), out)
    edges = np.linspace(-1.0, 1.0, 41)
    hist, _ = np.histogram(cos, bins=edges)
    write_csv(run.path("cosine_hist.csv"), ["bin_low", "bin_high", "count"],
              [(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], hist)])


def stage_replace(run: Run) -> None:
    p = run.config.experiment("replacement") or {}
    ds, d = run.dataset(), run.dictionary()
    firings = find_firings(ds, d, p.get("cap_per_feature", 30))[:p.get("max_firings", 1000)]
    if not firings:
        raise ValueError("dictionary never fires on the held-out split")
    classes = run.classes() if run.path("geometry.jsonl").exists() else None
    h = run.harness(p.get("horizon"), p.get("matched_norm", False))
    report, triples = run_replacement_suite(h, d, firings, classes, p.get("resamples", 1000))
    write_triples_jsonl(triples, run.path("triples.jsonl"))
    write_json(run.path("replacement.json"), report.to_json())
    write_csv(run.path("kl_scatter.csv"), ["feature", "kl_atom", "kl_delete", "kl_random"],
              [(t.firing.feature, t.kl_atom, t.kl_delete, t.kl_random) for t in triples])


def stage_predict(run: Run) -> None:
    p = run.config.experiment("predict") or {}
    ds, d, model = run.dataset(), run.dictionary(), run.host()
    cell = run.cell()
    firings = find_firings(ds, d, 5)
    rng = np.random.default_rng(run.config.seed)
    pick = rng.permutation(len(firings))[:p.get("n_fits", 40)]
    rows = []
    if d.decoder != "rank1":
        raise ValueError("prediction needs a rank-1 decoder")
    key, value = d.key, d.value
    for n, i in enumerate(sorted(pick.tolist())):
        f = firings[i]
        toks = run.corpus()[f.seq_id]
        t_eval = min(len(toks) - 1, f.position + p.get("horizon", 0))
        fit = fit_feature_sequence(model, toks[:t_eval + 1], cell, f.position, key[f.feature],
                                   value[f.feature], p.get("eps", 0.1), f.feature,
                                   readout=p.get("readout", "jacobian"), seed=n)
        rows.append({"feature": f.feature, "seq_id": f.seq_id, "position": f.position,
                     "eval_position": t_eval, "G": fit.G, "G_alpha": fit.G_alpha, "r2": fit.r2,
                     "r2_analytic": fit.r2_analytic, "degenerate": fit.degenerate})
    write_jsonl(run.path("predict.jsonl"), rows)
    write_json(run.path("predict.json"), summarize_predict(rows))


def summarize_predict(rows: list[dict]) -> dict:
    by = defaultdict(list)
    for r in rows:
        if r["r2"] is not None and not r["degenerate"]:
            by[r["feature"]].append(r["r2"])
    per_feature = {f: float(np.median(v)) for f, v in sorted(by.items())}
    vals = np.array(list(per_feature.values()))
    return {"n_fits": len(rows), "n_features": len(per_feature),
            "median_feature_r2": float(np.median(vals)) if len(vals) else None,
            "per_feature_r2": per_feature}


def _middle_band_target(model: HostModel, prompt, rng, lo: int = 5, hi: int = 20) -> int:
    lp = log_softmax(forward(model, prompt).logits[-1])
    order = np.argsort(-lp, kind="stable")
    return int(order[rng.integers(lo, min(hi, len(order) - 1) + 1)])


def stage_steer(run: Run) -> None:
    p = run.config.experiment("steer") or {}
    cfg = run.config
    ds, d, model = run.dataset(), run.dictionary(), run.host()
    cell = run.cell()
    rng = np.random.default_rng(cfg.seed)
    h = run.harness(p["eval_horizon"])
    corpus = run.corpus()
    val_seqs = np.unique(ds.seq_ids[ds.val_mask])
    train_seqs = np.unique(ds.seq_ids[ds.train_mask])
    parts = run.steer_parts
    summary: dict = {}
    if set(parts) != set(STEER_PARTS) and run.path("steer.json").exists():
        summary = json.loads(run.path("steer.json").read_text())

    if "erase" in parts or "install" in parts:
        per_feat = defaultdict(list)
        for f in find_firings(ds, d, p["firings_per_feature"]):
            per_feat[f.feature].append(f)
        ranked = sorted(per_feat, key=lambda k: (-len(per_feat[k]), k))
        chosen = [k for k in ranked if len(per_feat[k]) >= 10][:p["n_features"]]
        erase_rows, install_rows = [], []
        for feat in chosen:
            fr = per_feat[feat]
            pt = steer.preferred_token(h, fr)
            if "erase" in parts:
                er = steer.erase_at_firings(h, fr, pt.token, resamples=500)
                erase_rows.append({"feature": feat, "token": pt.token, "evidence": pt.evidence,
                                   "indeterminate": pt.indeterminate, **er.to_json(),
                                   "delta_logp": er.delta_logp})
            if "install" in parts:
                dr = steer.install_at_nonfiring(h, d, ds, feat, pt.token, p["install_magnitudes"],
                                                p["install_positions"])
                for m in dr.magnitudes:
                    install_rows.append({"feature": feat, "token": pt.token, "a_star": dr.a_star,
                                         "magnitude": m, "median": dr.medians[m],
                                         "p": dr.p_values[m], "p_holm": dr.p_holm[m],
                                         "monotone": dr.monotone, "delta_logp": dr.delta_logp[m]})
        if "erase" in parts:
            write_jsonl(run.path("steer_erase.jsonl"), erase_rows)
            summary["erase"] = {"features": chosen,
                                "tokens": [r["token"] for r in erase_rows],
                                "medians": [r["median"] for r in erase_rows],
                                "p": [r["wilcoxon_p"] for r in erase_rows]}
        if "install" in parts:
            write_jsonl(run.path("steer_install.jsonl"), install_rows)
            summary["install"] = {"features": chosen, "n_rows": len(install_rows)}

    if "sign" in parts:
        trials = []
        for i in range(p["sign_trials"]):
            sid = int(val_seqs[i % len(val_seqs)])
            L = int(rng.integers(8, cfg.corpus.length + 1))
            trials.append(steer.SignTrial(corpus[sid][:L], int(rng.integers(max(0, L - 4), L)),
                                          int(rng.integers(0, cfg.host.vocab_size))))
        sr = steer.sign_test(model, cell, trials, p["sign_eps"])
        write_jsonl(run.path("steer_sign.jsonl"),
                    [{"predicted": a, "measured": b} for a, b in zip(sr.predicted, sr.measured)])
        summary["sign"] = {"agreement": sr.agreement, "ci": [sr.ci.low, sr.ci.high],
                           "n": sr.n_used, "pearson_r": sr.pearson_r,
                           "median_ratio": sr.median_ratio}

    if "generate" in parts:
        gen_rows = []
        prompts = [corpus[int(val_seqs[i % len(val_seqs)])][:p["prompt_length"]]
                   for i in range(p["n_prompts"])]
        targets = [_middle_band_target(model, pr, rng) for pr in prompts]
        for dose in p["doses"]:
            for i, (pr, T) in enumerate(zip(prompts, targets)):
                g = steer.generation_edit(model, pr, cell, T, dose, p["positions"], p["horizon"])
                gen_rows.append({"dose": dose, "prompt": i, "target": T, "included": g.included,
                                 "base_included": g.base_included, "rank_before": g.rank_before,
                                 "rank_after": g.rank_after, "logp_lift": g.logp_lift})
        write_jsonl(run.path("steer_generate.jsonl"), gen_rows)
        summary["generate"] = summarize_generation(gen_rows)
        write_csv(run.path("dose_curve.csv"),
                  ["dose", "inclusion", "base_inclusion", "median_lift", "mean_lift"],
                  [(r["dose"], r["inclusion"], r["base_inclusion"], r["median_lift"],
                    r["mean_lift"]) for r in summary["generate"]["by_dose"]])

    if "amplify" in parts:
        # selection prompts come from the SAE's training sequences, steering prompts
        # from held-out ones, so selection never sees the steering prompts
        sel = [corpus[int(s)] for s in train_seqs[:p["amplify_prompts"]]]
        stp = [corpus[int(s)][:p["prompt_length"]] for s in val_seqs[:p["amplify_prompts"]]]
        alive = alive_features(d, ds)
        sw = steer.amplify_sweep(model, d, cell, sel, stp, p["marker"], 3, p["amplify_doses"],
                                 p["horizon"], cfg.seed, alive)
        amp_rows = [{"dose": dz, "rate": sw.rates[dz], "control_rate": sw.control_rates[dz],
                     "base_rate": sw.base_rate, "p": sw.p_values[dz]} for dz in sw.doses]
        write_jsonl(run.path("steer_amplify.jsonl"), amp_rows)
        summary["amplify"] = {"features": sw.features, "control": sw.control,
                              "mean_activation": sw.mean_activation, "rows": amp_rows}
    write_json(run.path("steer.json"), summary)


def summarize_generation(rows: list[dict]) -> dict:
    by = defaultdict(list)
    for r in rows:
        by[r["dose"]].append(r)
    out = []
    for dose in sorted(by):
        rs = by[dose]
        lift = np.array([r["logp_lift"] for r in rs])
        out.append({"dose": dose, "n": len(rs),
                    "inclusion": float(np.mean([r["included"] for r in rs])),
                    "base_inclusion": float(np.mean([r["base_included"] for r in rs])),
                    "median_lift": float(np.median(lift)), "mean_lift": float(lift.mean())})
    best = max(out, key=lambda r: (r["inclusion"], -r["dose"])) if out else None
    return {"by_dose": out, "best_dose": best["dose"] if best else None,
            "best_inclusion": best["inclusion"] if best else None,
            "base_inclusion": best["base_inclusion"] if best else None}


def stage_report(run: Run) -> None:
    from .report import build_summary, write_figures
    summary = build_summary(run.out)
    write_json(run.path("summary.json"), summary)
    write_figures(run.out)


STAGE_FUNCS: dict[str, Callable[[Run], None]] = {
    "train-host": stage_train_host, "capture": stage_capture, "train-sae": stage_train_sae,
    "partition": stage_partition, "replace": stage_replace, "predict": stage_predict,
    "steer": stage_steer, "report": stage_report,
}


def stage_plan(config: ExperimentConfig, experiment: str | None = None) -> list[str]:
    """Stages a full run executes, in order."""
    exps = [experiment] if experiment else list(config.experiments)
    wanted = {_EXPERIMENT_STAGE[e] for e in exps}
    if "replace" in wanted and "partition" in config.experiments:
        wanted.add("partition")
    return [s for s in STAGES if s in ("train-host", "capture", "train-sae", "report") or s in wanted]


def run_stage(run: Run, stage: str) -> None:
    run.out.mkdir(parents=True, exist_ok=True)
    marker = run.path(f"{stage}.partial")
    marker.write_text(stage + "\n")
    try:
        STAGE_FUNCS[stage](run)
    except ConfigError:
        raise
    except (NumericError, FloatingPointError) as exc:
        raise NumericStageError(stage, exc) from exc
    except Exception as exc:
        raise StageError(stage, exc) from exc
    marker.unlink()


def write_manifest(run: Run) -> dict:
    arts = {}
    for p in sorted(run.out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".partial"):
            arts[str(p.relative_to(run.out))] = sha256_file(p)
    man = {"config_hash": run.config.config_hash(), "seed": run.config.seed, "artifacts": arts}
    write_json(run.path("manifest.json"), man)
    return man


def run_pipeline(config: ExperimentConfig, out: str | Path | None = None,
                 experiment: str | None = None, stages: list[str] | None = None) -> dict:
    """Run the planned stages into ``out`` and return the manifest."""
    run = Run(config, Path(out or config.output))
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "config.json").write_text(config.to_json() + "\n")
    for stage in stages or stage_plan(config, experiment):
        log.info("stage %s", stage)
        run_stage(run, stage)
    return write_manifest(run)
