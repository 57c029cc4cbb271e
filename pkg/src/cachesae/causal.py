"""Replacement tests: swap one native write for an atom, nothing, or a random atom.

Every patched run goes through :func:`cachesae.hosts.forward` with
``resume=(base, t)``, which copies the cached prefix, so each condition works
on private state and the order of conditions cannot leak between them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import stats
from .capture import CaptureDataset
from .errors import DegenerateError, NumericError
from .hosts import ForwardTrace, HostModel, add_to_state, forward, log_softmax, replace_write
from .partition import dataset_codes, _split_mask
from .sae import Dictionary

CONDITIONS = ("atom", "delete", "random")


@dataclass(frozen=True)
class FiringRecord:
    seq_id: int
    position: int
    layer: int
    head: int
    feature: int
    coefficient: float
    dominant: bool = True

    @property
    def cell(self) -> tuple[int, int]:
        return (self.layer, self.head)


@dataclass(frozen=True)
class KLTriple:
    firing: FiringRecord
    kl_atom: float
    kl_delete: float
    kl_random: float

    def __post_init__(self):
        for v in (self.kl_atom, self.kl_delete, self.kl_random):
            if not (np.isfinite(v) and v >= 0):
                raise NumericError(f"KL must be finite and non-negative, got {v}")

    def to_json(self) -> dict:
        return {"seq": self.firing.seq_id, "t": self.firing.position,
                "feature": self.firing.feature, "coefficient": self.firing.coefficient,
                "kl_atom": self.kl_atom, "kl_delete": self.kl_delete, "kl_random": self.kl_random}


def kl_divergence(logp: np.ndarray, logq: np.ndarray) -> float:
    """KL(p || q) from log-probabilities; tiny negative rounding is clipped to 0."""
    p = np.exp(logp)
    kl = float(np.sum(p * (logp - logq)))
    if not np.isfinite(kl):
        raise NumericError("non-finite KL")
    if kl < -1e-12:
        raise NumericError(f"negative KL {kl}")
    return max(kl, 0.0)


def find_firings(dataset: CaptureDataset, d: Dictionary, cap_per_feature: int = 30,
                 split: str = "val") -> list[FiringRecord]:
    """Dominant-atom firings in dataset order, at most ``cap_per_feature`` per atom."""
    mask = _split_mask(dataset, split)
    rows = np.flatnonzero(mask)
    codes = dataset_codes(d, dataset, mask)
    layer, head = dataset.cell
    taken = np.zeros(d.n_f, dtype=int)
    out = []
    for r, code in zip(rows, codes):
        if not np.any(code > 0):
            continue
        i = int(np.argmax(code))
        if taken[i] >= cap_per_feature:
            continue
        taken[i] += 1
        out.append(FiringRecord(int(dataset.seq_ids[r]), int(dataset.positions[r]), layer, head,
                                i, float(code[i])))
    return out


# ----------------------------------------------------------------------------
# single replacement
# ----------------------------------------------------------------------------


def random_rank1(rng: np.random.Generator, dims: tuple[int, int]) -> np.ndarray:
    k = rng.normal(size=dims[0])
    v = rng.normal(size=dims[1])
    return np.outer(k / np.linalg.norm(k), v / np.linalg.norm(v))


def empirical_random_write(rng: np.random.Generator, pool: np.ndarray, norm: float) -> np.ndarray:
    """Each entry drawn from that entry's empirical values in ``pool``, rescaled to ``norm``."""
    n = len(pool)
    flat = pool.reshape(n, -1)
    draw = flat[rng.integers(0, n, size=flat.shape[1]), np.arange(flat.shape[1])]
    fn = np.linalg.norm(draw)
    if fn == 0:
        return np.zeros(pool.shape[1:])
    return (draw * norm / fn).reshape(pool.shape[1:])


def _firing_rng(seed: int, f: FiringRecord) -> np.random.Generator:
    return np.random.default_rng([seed, f.seq_id, f.position, f.feature])


@dataclass
class Harness:
    """Model, token corpus and options shared by a batch of replacement runs."""

    model: HostModel
    corpus: np.ndarray
    seed: int = 0
    horizon: int | None = None
    matched_norm: bool = False
    random_pool: np.ndarray | None = None   # native writes for the empirical control
    _bases: dict = field(default_factory=dict, repr=False)

    def tokens(self, seq_id: int) -> np.ndarray:
        return np.asarray(self.corpus[seq_id])

    def base(self, seq_id: int) -> ForwardTrace:
        tr = self._bases.get(seq_id)
        if tr is None:
            tr = forward(self.model, self.tokens(seq_id))
            if len(self._bases) > 256:
                self._bases.clear()
            self._bases[seq_id] = tr
        return tr

    def eval_position(self, f: FiringRecord, length: int) -> int:
        if self.horizon is None:
            return length - 1
        return min(length - 1, f.position + self.horizon)

    def delta(self, d: Dictionary | None, f: FiringRecord, condition: str,
              base: ForwardTrace) -> np.ndarray:
        native = base.native_write(f.position, f.layer, f.head)
        dims = native.shape
        if condition == "delete":
            return np.zeros(dims)
        if condition == "native":
            return native
        if condition == "atom":
            D = f.coefficient * d.atom(f.feature)
            if self.matched_norm:
                n = np.linalg.norm(D)
                D = D * (np.linalg.norm(native) / n) if n > 0 else D
            return D
        if condition == "random":
            rng = _firing_rng(self.seed, f)
            if self.random_pool is not None:
                return empirical_random_write(rng, self.random_pool, np.linalg.norm(native))
            return f.coefficient * random_rank1(rng, dims)
        raise ValueError(f"unknown condition {condition!r}")

    def kl_for_delta(self, f: FiringRecord, delta: np.ndarray) -> float:
        base = self.base(f.seq_id)
        toks = self.tokens(f.seq_id)
        t_eval = self.eval_position(f, len(toks))
        patched = forward(self.model, toks, [replace_write(f.position, f.layer, f.head, delta)],
                          resume=(base, f.position))
        return kl_divergence(log_softmax(patched.logits[t_eval]), log_softmax(base.logits[t_eval]))

    def score(self, d: Dictionary | None, f: FiringRecord, condition: str) -> float:
        return self.kl_for_delta(f, self.delta(d, f, condition, self.base(f.seq_id)))

    def triple(self, d: Dictionary, f: FiringRecord,
               order: Sequence[str] = CONDITIONS) -> KLTriple:
        vals = {c: self.score(d, f, c) for c in order}
        return KLTriple(f, vals["atom"], vals["delete"], vals["random"])


def replace_and_score(model: HostModel, tokens, firing: FiringRecord, condition: str,
                      d: Dictionary | None = None, seed: int = 0, delta: np.ndarray | None = None,
                      horizon: int | None = None, matched_norm: bool = False) -> float:
    """KL(p_patched || p_base) at the final (or ``horizon``) position for one firing.

    ``delta`` overrides the condition's replacement write.
    """
    corpus = {firing.seq_id: np.asarray(tokens)}
    h = Harness(model, corpus, seed, horizon, matched_norm)
    if delta is not None:
        return h.kl_for_delta(firing, np.asarray(delta, dtype=np.float64))
    return h.score(d, firing, condition)


def score_firings(harness: Harness, d: Dictionary, firings: Iterable[FiringRecord],
                  order: Sequence[str] = CONDITIONS) -> list[KLTriple]:
    return [harness.triple(d, f, order) for f in firings]


# ----------------------------------------------------------------------------
# aggregation
# ----------------------------------------------------------------------------


@dataclass
class ReplacementReport:
    n: int
    wins: int
    win_rate: float
    win_ci: stats.CI
    strict_chain_rate: float
    medians: dict[str, tuple[float, float]]
    per_atom_win: dict[int, float]
    per_atom_mean: float
    per_atom_ci: stats.CI | None
    cluster_ci_feature: stats.CI
    cluster_ci_sequence: stats.CI
    cliffs_delta: float
    wilcoxon_p: float
    register_vs_bundle_p: float | None = None
    random_over_atom: bool = False

    def to_json(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, stats.CI):
                out[k] = [v.low, v.high]
            elif isinstance(v, dict):
                out[k] = {str(a): b for a, b in v.items()}
            else:
                out[k] = v
        return out


def summarize_triples(triples: Sequence[KLTriple], classes: dict[int, str] | None = None,
                      resamples: int = 5000, seed: int = 0, per_atom_min: int = 5) -> ReplacementReport:
    if len(triples) == 0:
        raise ValueError("no firings to summarise")
    a = np.array([t.kl_atom for t in triples])
    dl = np.array([t.kl_delete for t in triples])
    r = np.array([t.kl_random for t in triples])
    feats = np.array([t.firing.feature for t in triples])
    seqs = np.array([t.firing.seq_id for t in triples])
    win = (a < dl).astype(float)
    wins = int(win.sum())
    per_atom = {}
    for fid in np.unique(feats):
        sel = feats == fid
        if sel.sum() >= per_atom_min:
            per_atom[int(fid)] = float(win[sel].mean())
    pa = np.array(list(per_atom.values()))
    pa_ci = stats.bootstrap_ci(pa, np.mean, resamples, seed) if len(pa) else None
    rvb = None
    if classes and per_atom:
        reg = [w for f, w in per_atom.items() if classes.get(f) == "register"]
        bun = [w for f, w in per_atom.items() if classes.get(f) == "bundle"]
        if reg and bun:
            rvb = stats.mann_whitney(reg, bun).p
    medians = {"atom": stats.median_mad(a), "delete": stats.median_mad(dl), "random": stats.median_mad(r)}
    return ReplacementReport(
        n=len(triples), wins=wins, win_rate=wins / len(triples),
        win_ci=stats.wilson_ci(wins, len(triples)),
        strict_chain_rate=float(np.mean((a < dl) & (dl < r))),
        medians=medians, per_atom_win=per_atom,
        per_atom_mean=float(pa.mean()) if len(pa) else float("nan"), per_atom_ci=pa_ci,
        cluster_ci_feature=stats.cluster_bootstrap(win, feats, np.mean, resamples, seed),
        cluster_ci_sequence=stats.cluster_bootstrap(win, seqs, np.mean, resamples, seed + 1),
        cliffs_delta=stats.cliffs_delta(a, dl),
        wilcoxon_p=stats.wilcoxon_signed_rank(a, dl).p,
        register_vs_bundle_p=rvb,
        random_over_atom=bool(medians["random"][0] > medians["atom"][0]),
    )


def run_replacement_suite(harness: Harness, d: Dictionary, firings: Sequence[FiringRecord],
                          classes: dict[int, str] | None = None, resamples: int = 5000,
                          ) -> tuple[ReplacementReport, list[KLTriple]]:
    if len(firings) == 0:
        raise ValueError("run_replacement_suite needs at least one firing")
    triples = score_firings(harness, d, firings)
    return summarize_triples(triples, classes, resamples, harness.seed), triples


def cosine_free_classes(triples: Sequence[KLTriple], min_firings: int = 5) -> dict[int, str]:
    """Register when the atom beats deletion on more than half its firings."""
    by = {}
    for t in triples:
        by.setdefault(t.firing.feature, []).append(t.kl_atom < t.kl_delete)
    return {f: ("register" if np.mean(w) > 0.5 else "bundle")
            for f, w in by.items() if len(w) >= min_firings}


def write_triples_jsonl(triples: Sequence[KLTriple], path) -> None:
    with Path(path).open("w") as fh:
        for t in triples:
            fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# selectivity
# ----------------------------------------------------------------------------


def topk_overlap(p: np.ndarray, q: np.ndarray, K: int) -> float:
    if K > len(p):
        raise ValueError(f"K={K} exceeds vocabulary {len(p)}")
    a = set(np.argsort(-p, kind="stable")[:K].tolist())
    b = set(np.argsort(-q, kind="stable")[:K].tolist())
    return len(a & b) / K


def selectivity(model: HostModel, tokens, position: int, cell: tuple[int, int],
                perturbation: np.ndarray, eps: float, K: int = 10, mode: str = "add",
                base: ForwardTrace | None = None) -> float:
    """Top-K overlap at the final position after a matched-norm perturbation.

    The perturbation is rescaled to ``eps`` times the native write's Frobenius
    norm.  ``mode="add"`` adds it to the state; ``mode="replace"`` swaps the
    native write for it.
    """
    tokens = np.asarray(tokens)
    if K > model.config.vocab_size:
        raise ValueError(f"K={K} exceeds vocabulary {model.config.vocab_size}")
    P = np.asarray(perturbation, dtype=np.float64)
    pn = np.linalg.norm(P)
    if pn == 0:
        raise DegenerateError("perturbation has zero norm")
    base = base or forward(model, tokens)
    layer, head = cell
    native = base.native_write(position, layer, head)
    delta = eps * np.linalg.norm(native) * P / pn
    if mode == "add":
        patch = add_to_state(position, layer, head, delta)
    elif mode == "replace":
        patch = replace_write(position, layer, head, delta)
    else:
        raise ValueError("mode must be 'add' or 'replace'")
    patched = forward(model, tokens, [patch], resume=(base, position))
    return topk_overlap(patched.probs(-1), base.probs(-1), K)


def orthogonal_rank1(key: np.ndarray, value: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit rank-1 matrix whose factors are orthogonal to ``key`` and ``value``."""
    def orth(u):
        u = u / np.linalg.norm(u)
        x = rng.normal(size=u.shape)
        x -= (x @ u) * u
        return x / np.linalg.norm(x)
    return np.outer(orth(np.asarray(key, float)), orth(np.asarray(value, float)))


# ----------------------------------------------------------------------------
# flat dictionary + SVD baseline
# ----------------------------------------------------------------------------


def top1_svd(M: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    return s[0] * np.outer(U[:, 0], Vt[0])


def flat_svd_delta(flat_dict: Dictionary, state: np.ndarray, native: np.ndarray) -> np.ndarray:
    """Top-1 SVD of the flat reconstruction, rescaled to the native write's norm."""
    rec = flat_dict.reconstruct(state)
    R1 = top1_svd(rec)
    n = np.linalg.norm(R1)
    if n == 0 or not np.isfinite(n):
        raise DegenerateError("flat reconstruction has zero norm")
    return R1 * (np.linalg.norm(native) / n)


def flat_svd_substitute(harness: Harness, flat_dict: Dictionary, firing: FiringRecord) -> float:
    base = harness.base(firing.seq_id)
    state = base.states[firing.position, firing.layer, firing.head]
    native = base.native_write(firing.position, firing.layer, firing.head)
    return harness.kl_for_delta(firing, flat_svd_delta(flat_dict, state, native))


# ----------------------------------------------------------------------------
# passage NLL under deletion of register writes
# ----------------------------------------------------------------------------


def _nll_bits(trace: ForwardTrace) -> float:
    lp = log_softmax(trace.logits[:-1])
    nxt = trace.tokens[1:]
    return float(-lp[np.arange(len(nxt)), nxt].mean() / np.log(2.0))


@dataclass(frozen=True)
class PassageNLL:
    baseline_bits: np.ndarray
    delete_delta: np.ndarray
    random_delta: np.ndarray
    n_patched: np.ndarray

    @property
    def mean_delete(self) -> float:
        return float(self.delete_delta.mean())

    @property
    def mean_random(self) -> float:
        return float(self.random_delta.mean())


def passage_nll_deletion(model: HostModel, passages, d: Dictionary, registers: Iterable[int],
                         cell: tuple[int, int], seed: int = 0) -> PassageNLL:
    """Per-passage change in NLL (bits/token) when every register firing's write is
    deleted, and when each is replaced by a matched-norm random rank-1 write.

    Firing positions come from the unpatched run.
    """
    regs = np.array(sorted(set(int(r) for r in registers)), dtype=int)
    layer, head = cell
    rng = np.random.default_rng(seed)
    base_b, del_d, rnd_d, counts = [], [], [], []
    for toks in passages:
        toks = np.asarray(toks)
        base = forward(model, toks)
        b = _nll_bits(base)
        base_b.append(b)
        if len(regs) == 0:
            del_d.append(0.0)
            rnd_d.append(0.0)
            counts.append(0)
            continue
        codes = d.code(base.states[:, layer, head])
        pos = np.flatnonzero((codes[:, regs] > 0).any(axis=1))
        counts.append(len(pos))
        dims = base.states.shape[-2:]
        dels = [replace_write(int(t), layer, head, np.zeros(dims)) for t in pos]
        rnds = [replace_write(int(t), layer, head,
                              random_rank1(rng, dims) * np.linalg.norm(base.native_write(int(t), layer, head)))
                for t in pos]
        del_d.append(_nll_bits(forward(model, toks, dels)) - b)
        rnd_d.append(_nll_bits(forward(model, toks, rnds)) - b)
    return PassageNLL(np.array(base_b), np.array(del_d), np.array(rnd_d), np.array(counts))


# ----------------------------------------------------------------------------
# rank-1 versus rank-2
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RankComparison:
    log_ratio: np.ndarray        # log(KL_r2 / KL_r1) per shared firing position
    kl_r1: np.ndarray
    kl_r2: np.ndarray
    median_log_ratio: float
    cliffs_delta: float          # delta(KL_r2, KL_r1); negative favours rank-2
    wilcoxon_p: float


def rank_comparison(harness: Harness, d1: Dictionary, d2: Dictionary, dataset: CaptureDataset,
                    max_positions: int = 500, split: str = "val", floor: float = 1e-12) -> RankComparison:
    """Top-1 atom substitution KL under each dictionary at positions where both fire."""
    mask = _split_mask(dataset, split)
    rows = np.flatnonzero(mask)
    c1 = dataset_codes(d1, dataset, mask)
    c2 = dataset_codes(d2, dataset, mask)
    both = np.flatnonzero((c1 > 0).any(1) & (c2 > 0).any(1))[:max_positions]
    layer, head = dataset.cell
    k1, k2 = [], []
    for j in both:
        r = rows[j]
        sid, t = int(dataset.seq_ids[r]), int(dataset.positions[r])
        i1, i2 = int(np.argmax(c1[j])), int(np.argmax(c2[j]))
        f1 = FiringRecord(sid, t, layer, head, i1, float(c1[j, i1]))
        f2 = FiringRecord(sid, t, layer, head, i2, float(c2[j, i2]))
        k1.append(harness.score(d1, f1, "atom"))
        k2.append(harness.score(d2, f2, "atom"))
    k1, k2 = np.array(k1), np.array(k2)
    if len(k1) == 0:
        raise ValueError("no positions where both dictionaries fire")
    lr = np.log(np.maximum(k2, floor)) - np.log(np.maximum(k1, floor))
    return RankComparison(lr, k1, k2, float(np.median(lr)), stats.cliffs_delta(k2, k1),
                          stats.wilcoxon_signed_rank(k2, k1).p)


def amplified_substitution(harness: Harness, d: Dictionary,
                           firings: Sequence[FiringRecord]) -> np.ndarray:
    """Per firing: True when the atom rescaled to the native norm does at least as
    much damage as deleting the write."""
    matched = Harness(harness.model, harness.corpus, harness.seed, harness.horizon, True,
                      harness.random_pool, harness._bases)
    return np.array([matched.score(d, f, "atom") >= harness.score(d, f, "delete")
                     for f in firings])
