"""Atom geometry against native writes, 1-D mixture fits, and classes.

An atom is a *register* when its median cosine to the native write at its
firing positions is at least ``tau``, a *bundle* when it is alive but below
``tau``, and *null* when it is dead.  The cosine is signed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .capture import CaptureDataset
from .errors import ShapeError
from .sae import Dictionary

REGISTER, BUNDLE, NULL = "register", "bundle", "null"
ALIVE_MIN = 10
VAR_FLOOR = 1e-8


def _split_mask(dataset: CaptureDataset, split: str) -> np.ndarray:
    if split == "val":
        return dataset.val_mask
    if split == "train":
        return dataset.train_mask
    if split == "all":
        return np.ones(len(dataset), dtype=bool)
    raise ValueError(f"unknown split {split!r}")


def dataset_codes(d: Dictionary, dataset: CaptureDataset, mask=None) -> np.ndarray:
    S = dataset.states if mask is None else dataset.states[mask]
    if dataset.centered:
        S = S + dataset.mean
    return d.code(S)


def matrix_cosines(atom: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """Signed cosine between vec(atom) and each vec(mats[n])."""
    a = atom.ravel()
    M = mats.reshape(len(mats), -1)
    denom = np.linalg.norm(a) * np.linalg.norm(M, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, M @ a / denom, 0.0)


def cosine_to_native(d: Dictionary, dataset: CaptureDataset, i: int, split: str = "val") -> float:
    """Median signed cosine between atom ``i`` and the native writes where it fires.

    Returns NaN when the atom never fires on the split.
    """
    mask = _split_mask(dataset, split)
    codes = dataset_codes(d, dataset, mask)
    idx = np.flatnonzero(mask)[codes[:, i] > 0]
    if len(idx) == 0:
        return float("nan")
    return float(np.median(matrix_cosines(d.atom(i), dataset.native_writes(idx))))


@dataclass(frozen=True)
class AtomGeometry:
    feature: int
    median_cos: float
    firings: int
    cls: str = NULL

    def to_json(self) -> dict:
        out = asdict(self)
        out["id"] = out.pop("feature")
        out["class"] = out.pop("cls")
        if not np.isfinite(out["median_cos"]):
            out["median_cos"] = None
        return out


def atom_geometry(d: Dictionary, dataset: CaptureDataset, split: str = "val",
                  alive_min: int = ALIVE_MIN, tau: float = 0.05) -> list[AtomGeometry]:
    """Median cosine, firing count and class for every atom (one encode pass)."""
    mask = _split_mask(dataset, split)
    codes = dataset_codes(d, dataset, mask)
    rows = np.flatnonzero(mask)
    natives = dataset.native_writes(rows)
    atoms = d.atoms()
    out = []
    for i in range(d.n_f):
        fire = codes[:, i] > 0
        n = int(fire.sum())
        med = float(np.median(matrix_cosines(atoms[i], natives[fire]))) if n else float("nan")
        out.append(AtomGeometry(i, med, n))
    return classify(out, tau, alive_min)[0]


def classify(geoms: Sequence[AtomGeometry], tau: float = 0.05,
             alive_min: int = ALIVE_MIN) -> tuple[list[AtomGeometry], dict[str, int]]:
    labelled = []
    for g in geoms:
        if g.firings < alive_min or not np.isfinite(g.median_cos):
            cls = NULL
        elif g.median_cos >= tau:
            cls = REGISTER
        else:
            cls = BUNDLE
        labelled.append(AtomGeometry(g.feature, g.median_cos, g.firings, cls))
    counts = {c: sum(g.cls == c for g in labelled) for c in (REGISTER, BUNDLE, NULL)}
    return labelled, counts


def tau_sweep(geoms: Sequence[AtomGeometry], taus: Iterable[float] = (0.02, 0.03, 0.05, 0.10),
              alive_min: int = ALIVE_MIN) -> dict[float, dict[str, int]]:
    return {float(t): classify(geoms, t, alive_min)[1] for t in taus}


def write_geometry_jsonl(geoms: Sequence[AtomGeometry], path) -> None:
    with Path(path).open("w") as fh:
        for g in geoms:
            fh.write(json.dumps(g.to_json(), sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# Gaussian mixture
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class GMMFit:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    loglik: float
    bic: float
    n: int
    history: tuple[tuple[float, ...], ...]   # per restart, log-likelihood per iteration

    @property
    def k(self) -> int:
        return len(self.weights)


def _log_norm(x: np.ndarray, mu: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * (np.log(2 * np.pi * var)[None] + (x[:, None] - mu[None]) ** 2 / var[None])


def _loglik(x, w, mu, var) -> tuple[float, np.ndarray]:
    lp = _log_norm(x, mu, var) + np.log(w)[None]
    m = lp.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))
    return float(lse.sum()), np.exp(lp - lse[:, None])


def bic(loglik: float, k: int, n: int) -> float:
    """-2 log L + (3k - 1) log n (k means, k variances, k - 1 free weights)."""
    return -2.0 * loglik + (3 * k - 1) * np.log(n)


def fit_gmm(values, k: int = 2, restarts: int = 10, seed: int = 0, max_iter: int = 500,
            tol: float = 1e-10) -> GMMFit:
    """EM for a 1-D ``k``-component Gaussian mixture; best of ``restarts`` starts."""
    x = np.asarray(values, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    n = len(x)
    if k < 1 or n < 3 * k:
        raise ValueError(f"fit_gmm needs at least {3 * k} finite values, got {n}")
    if k == 1:
        mu, var = np.array([x.mean()]), np.array([max(x.var(), VAR_FLOOR)])
        ll, _ = _loglik(x, np.ones(1), mu, var)
        return GMMFit(np.ones(1), mu, var, ll, bic(ll, 1, n), n, ((ll,),))
    rng = np.random.default_rng(seed)
    best = None
    histories = []
    for _ in range(restarts):
        mu = rng.choice(x, size=k, replace=False)
        var = np.full(k, max(x.var(), VAR_FLOOR))
        w = np.full(k, 1.0 / k)
        ll, resp = _loglik(x, w, mu, var)
        hist = [ll]
        for _ in range(max_iter):
            nk = resp.sum(axis=0) + 1e-300
            w = nk / n
            mu = (resp * x[:, None]).sum(axis=0) / nk
            var = np.maximum((resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk, VAR_FLOOR)
            new_ll, resp = _loglik(x, w, mu, var)
            hist.append(new_ll)
            if abs(new_ll - ll) <= tol * max(1.0, abs(ll)):
                ll = new_ll
                break
            ll = new_ll
        histories.append(tuple(hist))
        if best is None or ll > best[0]:
            order = np.argsort(mu)
            best = (ll, w[order], mu[order], var[order])
    ll, w, mu, var = best
    return GMMFit(w, mu, var, ll, bic(ll, k, n), n, tuple(histories))


def delta_bic(values, k_hi: int = 2, k_lo: int = 1, seed: int = 0, restarts: int = 10) -> float:
    """BIC(k_hi) - BIC(k_lo); negative favours the larger mixture."""
    return fit_gmm(values, k_hi, restarts, seed).bic - fit_gmm(values, k_lo, restarts, seed).bic


# ----------------------------------------------------------------------------
# cross-seed stability
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Stability:
    matched_fraction: float
    n_matched: int
    pairs: tuple[tuple[int, int, float], ...]


def seed_stability(dict_a: Dictionary, dict_b: Dictionary, threshold: float = 0.9,
                   subset_a: Sequence[int] | None = None,
                   subset_b: Sequence[int] | None = None) -> Stability:
    """Greedy one-to-one matching by signed atom-matrix cosine.

    The fraction is the number of matched pairs above ``threshold`` divided by
    the smaller atom count under consideration.
    """
    if dict_a.dims != dict_b.dims:
        raise ShapeError(f"dictionaries have dims {dict_a.dims} vs {dict_b.dims}")
    ia = np.arange(dict_a.n_f) if subset_a is None else np.asarray(subset_a, dtype=int)
    ib = np.arange(dict_b.n_f) if subset_b is None else np.asarray(subset_b, dtype=int)
    if len(ia) == 0 or len(ib) == 0:
        return Stability(0.0, 0, ())
    A = dict_a.atoms()[ia].reshape(len(ia), -1)
    B = dict_b.atoms()[ib].reshape(len(ib), -1)
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    B = B / np.linalg.norm(B, axis=1, keepdims=True)
    C = A @ B.T
    order = np.argsort(-C, axis=None, kind="stable")
    used_a, used_b = set(), set()
    pairs = []
    for flat in order:
        r, c = divmod(int(flat), len(ib))
        if r in used_a or c in used_b:
            continue
        used_a.add(r)
        used_b.add(c)
        pairs.append((int(ia[r]), int(ib[c]), float(C[r, c])))
        if len(pairs) == min(len(ia), len(ib)):
            break
    n_matched = sum(p[2] > threshold for p in pairs)
    return Stability(n_matched / min(len(ia), len(ib)), n_matched, tuple(pairs))


def count_cv(counts: Sequence[dict[str, int]]) -> dict[str, float]:
    """Coefficient of variation of each class count across seeds."""
    out = {}
    for cls in (REGISTER, BUNDLE, NULL):
        v = np.array([c[cls] for c in counts], dtype=np.float64)
        out[cls] = float(v.std(ddof=1) / v.mean()) if len(v) > 1 and v.mean() > 0 else float("nan")
    return out
