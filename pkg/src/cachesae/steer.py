"""Cache interventions built on the dictionary: erase, install, steer, amplify.

All interventions are exact no-ops at zero magnitude: each one adds its edit
to the state, so a zero edit leaves every float untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import stats
from .capture import CaptureDataset
from .causal import FiringRecord, Harness
from .errors import DegenerateError
from .hosts import CachePatch, HostModel, add_to_state, forward, generate_greedy, log_softmax
from .partition import dataset_codes
from .predictor import direct_readout, gate_product
from .sae import Dictionary

INDETERMINATE_NATS = 0.1


@dataclass(frozen=True)
class SteerDirection:
    target: int
    direction: np.ndarray
    cell: tuple[int, int]


@dataclass(frozen=True)
class EditPlan:
    positions: tuple[int, ...]
    magnitude: float
    direction: SteerDirection

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("dose must be non-negative")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("edit positions must be strictly increasing")

    def patches(self, position: int) -> list[CachePatch]:
        if position not in self.positions:
            return []
        return [_steer_patch(position, self.direction.cell, self.direction.direction, self.magnitude)]


def steering_direction(model: HostModel, cell: tuple[int, int], target: int) -> SteerDirection:
    """Unit head-output direction W_O[head] @ W_U[target] that raises ``target``'s logit."""
    if not 0 <= target < model.config.vocab_size:
        raise ValueError(f"target {target} outside the vocabulary")
    v = direct_readout(model, cell, [target])[0]
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise DegenerateError(f"target {target} is invisible from head {cell}")
    return SteerDirection(int(target), v / n, tuple(cell))


# ----------------------------------------------------------------------------
# preferred token, erasure, installation
# ----------------------------------------------------------------------------


def _eval_logprobs(h: Harness, f: FiringRecord, delta: np.ndarray | None) -> np.ndarray:
    base = h.base(f.seq_id)
    toks = h.tokens(f.seq_id)
    t = h.eval_position(f, len(toks))
    if delta is None:
        return log_softmax(base.logits[t])
    from .hosts import replace_write
    pt = forward(h.model, toks, [replace_write(f.position, f.layer, f.head, delta)],
                 resume=(base, f.position))
    return log_softmax(pt.logits[t])


@dataclass(frozen=True)
class PreferredToken:
    token: int
    evidence: float
    indeterminate: bool
    per_token: np.ndarray


def preferred_token(harness: Harness, firings: Sequence[FiringRecord]) -> PreferredToken:
    """Token whose log-probability the feature's writes support most.

    Sums log p_native - log p_delete over the firings at the harness's
    evaluation position.
    """
    if len(firings) == 0:
        raise ValueError("preferred_token needs firings")
    total = None
    for f in firings:
        dims = harness.base(f.seq_id).states.shape[-2:]
        diff = _eval_logprobs(harness, f, None) - _eval_logprobs(harness, f, np.zeros(dims))
        total = diff if total is None else total + diff
    tok = int(np.argmax(total))
    ev = float(total[tok])
    return PreferredToken(tok, ev, ev < INDETERMINATE_NATS, total)


@dataclass
class ErasureReport:
    token: int
    delta_logp: np.ndarray          # log p_deleted - log p_native per firing
    median: float
    mean: float
    wilcoxon_p: float
    median_ci: stats.CI
    rank_native: np.ndarray
    rank_patched: np.ndarray

    def to_json(self) -> dict:
        return {"token": self.token, "n": int(len(self.delta_logp)), "median": self.median,
                "mean": self.mean, "wilcoxon_p": self.wilcoxon_p,
                "median_ci": [self.median_ci.low, self.median_ci.high],
                "median_rank_native": float(np.median(self.rank_native)),
                "median_rank_patched": float(np.median(self.rank_patched))}


def _rank(logp: np.ndarray, tok: int) -> int:
    return int(np.sum(logp > logp[tok]))


def erase_at_firings(harness: Harness, firings: Sequence[FiringRecord], token: int,
                     min_firings: int = 10, resamples: int = 2000) -> ErasureReport:
    if len(firings) < min_firings:
        raise ValueError(f"erase_at_firings needs >= {min_firings} firings")
    d, rn, rp = [], [], []
    for f in firings:
        dims = harness.base(f.seq_id).states.shape[-2:]
        lp0 = _eval_logprobs(harness, f, None)
        lp1 = _eval_logprobs(harness, f, np.zeros(dims))
        d.append(lp1[token] - lp0[token])
        rn.append(_rank(lp0, token))
        rp.append(_rank(lp1, token))
    d = np.array(d)
    return ErasureReport(token, d, float(np.median(d)), float(d.mean()),
                         stats.wilcoxon_signed_rank(d).p,
                         stats.bootstrap_ci(d, np.median, resamples, harness.seed),
                         np.array(rn), np.array(rp))


@dataclass
class DoseReport:
    a_star: float
    magnitudes: tuple[float, ...]
    delta_logp: dict[float, np.ndarray]
    medians: dict[float, float]
    p_values: dict[float, float]
    p_holm: dict[float, float]
    monotone: bool

    def to_json(self) -> dict:
        return {"a_star": self.a_star, "magnitudes": list(self.magnitudes),
                "medians": {str(k): v for k, v in self.medians.items()},
                "p": {str(k): v for k, v in self.p_values.items()},
                "p_holm": {str(k): v for k, v in self.p_holm.items()},
                "monotone": self.monotone}


def natural_coefficient(d: Dictionary, dataset: CaptureDataset, feature: int) -> float:
    """Median nonzero coefficient a* of ``feature`` over the dataset."""
    c = dataset_codes(d, dataset)[:, feature]
    c = c[c > 0]
    if len(c) == 0:
        raise ValueError(f"feature {feature} never fires")
    return float(np.median(c))


def nonfiring_positions(d: Dictionary, dataset: CaptureDataset, feature: int, n: int,
                        seed: int = 0, skip: int = 4) -> list[tuple[int, int]]:
    c = dataset_codes(d, dataset)[:, feature]
    ok = np.flatnonzero((c == 0) & (dataset.positions >= skip))
    if len(ok) == 0:
        raise ValueError("no non-firing positions")
    pick = np.random.default_rng(seed).choice(ok, size=min(n, len(ok)), replace=False)
    pick.sort()
    return [(int(dataset.seq_ids[i]), int(dataset.positions[i])) for i in pick]


def install_at_nonfiring(harness: Harness, d: Dictionary, dataset: CaptureDataset, feature: int,
                         token: int, magnitudes: Sequence[float] = (1.0, 2.0, 4.0),
                         n_positions: int = 50) -> DoseReport:
    """Add m * a* * atom at positions where the feature is silent; track log p(token)."""
    a_star = natural_coefficient(d, dataset, feature)
    positions = nonfiring_positions(d, dataset, feature, n_positions, harness.seed)
    layer, head = dataset.cell
    atom = d.atom(feature)
    out: dict[float, np.ndarray] = {}
    for m in magnitudes:
        vals = []
        for sid, t in positions:
            base = harness.base(sid)
            toks = harness.tokens(sid)
            f = FiringRecord(sid, t, layer, head, feature, 0.0, False)
            te = harness.eval_position(f, len(toks))
            pt = forward(harness.model, toks, [add_to_state(t, layer, head, m * a_star * atom)],
                         resume=(base, t))
            vals.append(log_softmax(pt.logits[te])[token] - log_softmax(base.logits[te])[token])
        out[float(m)] = np.array(vals)
    ps = {m: stats.wilcoxon_signed_rank(v).p for m, v in out.items()}
    adj = stats.holm(list(ps.values()))
    meds = {m: float(np.median(v)) for m, v in out.items()}
    mags = sorted(out)
    mono = all(abs(meds[a]) <= abs(meds[b]) + 1e-15 for a, b in zip(mags, mags[1:]))
    return DoseReport(a_star, tuple(mags), out, meds, ps, dict(zip(ps, adj.tolist())), mono)


# ----------------------------------------------------------------------------
# single-position sign test
# ----------------------------------------------------------------------------


@dataclass
class SignTrial:
    tokens: np.ndarray
    position: int
    target: int


@dataclass
class SignReport:
    agreement: float
    ci: stats.CI
    n_used: int
    pearson_r: float
    median_ratio: float
    predicted: np.ndarray
    measured: np.ndarray


def sign_test(model: HostModel, cell: tuple[int, int], trials: Sequence[SignTrial],
              eps: float = 1e-3) -> SignReport:
    """Write eps * k_hat v*^T at each trial position and compare the measured final
    logit change of the target with G^alpha eps <k_hat, q><v*, u_T>."""
    layer, head = cell
    pred, meas = [], []
    for tr in trials:
        toks = np.asarray(tr.tokens)
        base = forward(model, toks)
        t = len(toks) - 1
        k = base.keys[tr.position, layer, head]
        k_hat = k / np.linalg.norm(k)
        sd = steering_direction(model, cell, tr.target)
        u = direct_readout(model, cell, [tr.target])[0]
        q = base.queries[t, layer, head]
        G = gate_product(base, cell, tr.position, t)
        pred.append(G * eps * float(k_hat @ q) * float(sd.direction @ u))
        pt = forward(model, toks, [add_to_state(tr.position, layer, head,
                                                eps * np.outer(k_hat, sd.direction))],
                     resume=(base, tr.position))
        meas.append(pt.logits[t, tr.target] - base.logits[t, tr.target])
    pred, meas = np.array(pred), np.array(meas)
    used = pred != 0
    agree = np.sign(pred[used]) == np.sign(meas[used])
    n = int(used.sum())
    ci = stats.wilson_ci(int(agree.sum()), n) if n else stats.CI(0.0, 1.0, degenerate=True)
    corr = stats.pearson(pred[used], meas[used]) if n >= 2 else None
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = float(np.median(meas[used] / pred[used])) if n else float("nan")
    return SignReport(float(agree.mean()) if n else float("nan"), ci, n,
                      corr.r if corr else float("nan"), ratio, pred, meas)


# ----------------------------------------------------------------------------
# generation edits
# ----------------------------------------------------------------------------


@dataclass
class GenerationEdit:
    included: bool
    base_included: bool
    rank_before: int
    rank_after: int
    logp_lift: float
    tokens: np.ndarray
    base_tokens: np.ndarray


def _steer_patch(position: int, cell, direction: np.ndarray, m: float) -> CachePatch:
    layer, head = cell

    def fn(S, e):
        k_hat = e.k / np.linalg.norm(e.k)
        scale = m * np.linalg.norm(e.native_write())
        return S + scale * np.outer(k_hat, direction)
    return CachePatch(position, layer, head, fn)


def generation_edit(model: HostModel, prompt, cell: tuple[int, int], target: int, m: float,
                    n_positions: int = 3, horizon: int = 20) -> GenerationEdit:
    """Steer towards ``target`` by writing m * |native| * k_hat v*^T into the cell at
    the last prompt position and the next ``n_positions - 1`` decoding steps."""
    prompt = np.asarray(prompt)
    if len(prompt) == 0:
        raise ValueError("prompt is empty")
    start = len(prompt) - 1
    plan = EditPlan(tuple(range(start, start + n_positions)), m,
                    steering_direction(model, cell, target))
    base_toks, base_logits = generate_greedy(model, prompt, horizon, return_logits=True)
    toks, logits = generate_greedy(model, prompt, horizon, edit=plan.patches, return_logits=True)
    lp0, lp1 = log_softmax(base_logits[0]), log_softmax(logits[0])
    return GenerationEdit(bool(np.any(toks == target)), bool(np.any(base_toks == target)),
                          _rank(lp0, target), _rank(lp1, target), float(lp1[target] - lp0[target]),
                          toks, base_toks)


# ----------------------------------------------------------------------------
# coefficient amplification during decoding
# ----------------------------------------------------------------------------


def marker_selectivity(d: Dictionary, model: HostModel, cell: tuple[int, int], prompts,
                       marker: int) -> np.ndarray:
    """Per feature: mean coefficient at marker-token positions minus elsewhere."""
    layer, head = cell
    on, off = [], []
    for p in prompts:
        tr = forward(model, np.asarray(p))
        codes = d.code(tr.states[:, layer, head])
        is_m = np.asarray(p) == marker
        on.append(codes[is_m])
        off.append(codes[~is_m])
    on, off = np.concatenate(on), np.concatenate(off)
    if len(on) == 0:
        raise ValueError("marker never occurs in the selection prompts")
    return on.mean(axis=0) - off.mean(axis=0)


def _amplify_patch(position: int, cell, d: Dictionary, features: np.ndarray, offset: float,
                   only_active: bool) -> CachePatch:
    layer, head = cell
    atoms = d.atoms()[features]

    def fn(S, e):
        if offset == 0:
            return S
        if only_active:
            active = d.code(S)[features] > 0
            if not active.any():
                return S
            return S + offset * atoms[active].sum(axis=0)
        return S + offset * atoms.sum(axis=0)
    return CachePatch(position, layer, head, fn)


@dataclass
class AmplifyResult:
    tokens: np.ndarray
    base_tokens: np.ndarray
    marker_rate: float
    base_marker_rate: float


def amplify_coefficients(model: HostModel, d: Dictionary, cell: tuple[int, int],
                         features: Sequence[int], offset: float, prompt, horizon: int = 20,
                         marker: int = 0, only_active: bool = False) -> AmplifyResult:
    """Raise the chosen features' coefficients by ``offset`` at every decoding step
    (from the last prompt position on) and report the marker-token rate."""
    prompt = np.asarray(prompt)
    feats = np.asarray(features, dtype=int)
    start = len(prompt) - 1

    def hook(pos):
        return [_amplify_patch(pos, cell, d, feats, offset, only_active)] if pos >= start else []

    base = generate_greedy(model, prompt, horizon)
    toks = generate_greedy(model, prompt, horizon, edit=hook)
    return AmplifyResult(toks, base, float(np.mean(toks == marker)), float(np.mean(base == marker)))


@dataclass
class AmplifySweep:
    features: np.ndarray
    control: np.ndarray
    mean_activation: float
    doses: tuple[float, ...]
    base_rate: float
    rates: dict[float, float]
    control_rates: dict[float, float]
    p_values: dict[float, float] = field(default_factory=dict)

    def shift(self, dose: float) -> float:
        return abs(self.rates[dose] - self.base_rate)

    def control_shift(self, dose: float) -> float:
        return abs(self.control_rates[dose] - self.base_rate)


def amplify_sweep(model: HostModel, d: Dictionary, cell: tuple[int, int], selection_prompts,
                  steering_prompts, marker: int = 0, n_features: int = 3,
                  doses: Sequence[float] = (2.0, 5.0, 10.0), horizon: int = 20, seed: int = 0,
                  alive: np.ndarray | None = None) -> AmplifySweep:
    """Amplify the most marker-selective features against random alive features."""
    score = marker_selectivity(d, model, cell, selection_prompts, marker)
    pool = np.arange(d.n_f) if alive is None else np.flatnonzero(alive)
    feats = pool[np.argsort(-score[pool], kind="stable")[:n_features]]
    rng = np.random.default_rng(seed)
    others = np.setdiff1d(pool, feats)
    control = rng.choice(others, size=min(n_features, len(others)), replace=False)
    layer, head = cell
    acts = []
    for p in selection_prompts:
        tr = forward(model, np.asarray(p))
        c = d.code(tr.states[:, layer, head])[:, feats]
        acts.append(c[c > 0])
    acts = np.concatenate(acts)
    mean_act = float(acts.mean()) if len(acts) else 1.0
    base_rates, rates, ctrl = [], {}, {}
    per_prompt = {}
    for dose in doses:
        r, rc = [], []
        for p in steering_prompts:
            res = amplify_coefficients(model, d, cell, feats, dose * mean_act, p, horizon, marker)
            rcr = amplify_coefficients(model, d, cell, control, dose * mean_act, p, horizon, marker)
            r.append(res.marker_rate)
            rc.append(rcr.marker_rate)
            if dose == doses[0]:
                base_rates.append(res.base_marker_rate)
        rates[float(dose)] = float(np.mean(r))
        ctrl[float(dose)] = float(np.mean(rc))
        per_prompt[float(dose)] = np.array(r)
    base = np.array(base_rates)
    pv = {dose: stats.wilcoxon_signed_rank(per_prompt[dose], base).p for dose in per_prompt}
    return AmplifySweep(feats, control, mean_act, tuple(float(x) for x in doses),
                        float(base.mean()), rates, ctrl, pv)
