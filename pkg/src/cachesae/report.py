"""Run summary, headline figures, and the audit that recomputes the summary.

Every number in ``summary.json`` that has a per-record source is recomputed
from the JSONL files by :func:`audit`; a mismatch means the summary and the
records disagree.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .pipeline import read_jsonl, summarize_generation, summarize_predict

_SECTIONS = ("host.json", "capture.json", "sae_metrics.json", "partition.json",
             "replacement.json", "predict.json", "steer.json")


def _load(out: Path, name: str):
    p = out / name
    return json.loads(p.read_text()) if p.exists() else None


def recompute(out: Path) -> dict:
    """Headline numbers derived only from the per-record JSONL files."""
    out = Path(out)
    r: dict = {}
    if (out / "triples.jsonl").exists():
        rows = read_jsonl(out / "triples.jsonl")
        a = np.array([t["kl_atom"] for t in rows])
        d = np.array([t["kl_delete"] for t in rows])
        x = np.array([t["kl_random"] for t in rows])
        r["replacement"] = {"n": len(rows), "wins": int(np.sum(a < d)),
                            "win_rate": float(np.mean(a < d)),
                            "strict_chain_rate": float(np.mean((a < d) & (d < x))),
                            "median_atom": float(np.median(a)), "median_delete": float(np.median(d)),
                            "median_random": float(np.median(x))}
    if (out / "geometry.jsonl").exists():
        rows = read_jsonl(out / "geometry.jsonl")
        r["partition"] = {c: sum(g["class"] == c for g in rows) for c in ("register", "bundle", "null")}
    if (out / "predict.jsonl").exists():
        r["predict"] = summarize_predict(read_jsonl(out / "predict.jsonl"))["median_feature_r2"]
    if (out / "steer_generate.jsonl").exists():
        g = summarize_generation(read_jsonl(out / "steer_generate.jsonl"))
        r["generate"] = {"best_inclusion": g["best_inclusion"], "base_inclusion": g["base_inclusion"]}
    if (out / "steer_sign.jsonl").exists():
        rows = read_jsonl(out / "steer_sign.jsonl")
        pr = np.array([t["predicted"] for t in rows])
        me = np.array([t["measured"] for t in rows])
        used = pr != 0
        r["sign"] = float(np.mean(np.sign(pr[used]) == np.sign(me[used]))) if used.any() else None
    return r


def build_summary(out) -> dict:
    out = Path(out)
    s = {name.removesuffix(".json"): _load(out, name) for name in _SECTIONS}
    s = {k: v for k, v in s.items() if v is not None}
    s["headline"] = recompute(out)
    return s


def _close(a, b, tol: float = 1e-9) -> bool:
    if a is None or b is None:
        return a is b
    return abs(float(a) - float(b)) <= tol * max(1.0, abs(float(a)))


def audit(out) -> list[str]:
    """Compare the stage summaries with numbers recomputed from the records."""
    out = Path(out)
    rec = recompute(out)
    bad: list[str] = []
    rep = _load(out, "replacement.json")
    if rep and "replacement" in rec:
        for key in ("n", "wins", "win_rate", "strict_chain_rate"):
            if not _close(rep[key], rec["replacement"][key]):
                bad.append(f"replacement.{key}: {rep[key]} vs {rec['replacement'][key]}")
        for cond in ("atom", "delete", "random"):
            if not _close(rep["medians"][cond][0], rec["replacement"][f"median_{cond}"]):
                bad.append(f"replacement.median_{cond}")
    part = _load(out, "partition.json")
    if part and "partition" in rec and part["counts"] != rec["partition"]:
        bad.append(f"partition.counts: {part['counts']} vs {rec['partition']}")
    pred = _load(out, "predict.json")
    if pred and "predict" in rec and not _close(pred["median_feature_r2"], rec["predict"]):
        bad.append("predict.median_feature_r2")
    st = _load(out, "steer.json")
    if st and "generate" in rec:
        for key in ("best_inclusion", "base_inclusion"):
            if not _close(st["generate"][key], rec["generate"][key]):
                bad.append(f"steer.generate.{key}")
    if st and "sign" in rec and not _close(st["sign"]["agreement"], rec["sign"]):
        bad.append("steer.sign.agreement")
    summ = _load(out, "summary.json")
    if summ and summ.get("headline") != json.loads(json.dumps(rec)):
        bad.append("summary.headline differs from recomputation")
    return bad


# ----------------------------------------------------------------------------
# figures
# ----------------------------------------------------------------------------


def _csv(path: Path) -> tuple[list[str], np.ndarray]:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]) if len(lines) > 1 \
        else np.zeros((0, len(header)))
    return header, data


def write_figures(out) -> list[Path]:
    """Static PNGs for the headline plots, written without timestamps."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    written = []
    meta = {"Software": None}

    if (out / "kl_scatter.csv").exists():
        _, d = _csv(out / "kl_scatter.csv")
        fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
        if len(d):
            floor = 1e-12
            ax.loglog(np.maximum(d[:, 2], floor), np.maximum(d[:, 1], floor), ".", ms=2)
            lo = floor
            hi = max(1e-6, float(np.max(d[:, 1:3])))
            ax.plot([lo, hi], [lo, hi], "k-", lw=0.5)
        ax.set_xlabel("KL delete")
        ax.set_ylabel("KL atom")
        p = fig_dir / "kl_scatter.png"
        fig.savefig(p, metadata=meta)
        plt.close(fig)
        written.append(p)

    if (out / "cosine_hist.csv").exists():
        _, d = _csv(out / "cosine_hist.csv")
        fig, ax = plt.subplots(figsize=(5, 3), dpi=100)
        if len(d):
            ax.bar(d[:, 0], d[:, 2], width=d[:, 1] - d[:, 0], align="edge")
        ax.set_xlabel("median cosine to native write")
        ax.set_ylabel("atoms")
        p = fig_dir / "cosine_hist.png"
        fig.savefig(p, metadata=meta)
        plt.close(fig)
        written.append(p)

    if (out / "dose_curve.csv").exists():
        _, d = _csv(out / "dose_curve.csv")
        fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
        if len(d):
            ax.plot(d[:, 0], d[:, 1], "o-", label="edited")
            ax.plot(d[:, 0], d[:, 2], "s--", label="unedited")
        ax.set_xlabel("dose (x native norm)")
        ax.set_ylabel("target inclusion")
        ax.legend()
        p = fig_dir / "dose_curve.png"
        fig.savefig(p, metadata=meta)
        plt.close(fig)
        written.append(p)
    return written
