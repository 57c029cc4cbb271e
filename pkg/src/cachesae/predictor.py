"""Logit-change prediction for a rank-1 perturbation of one head's cache.

A perturbation eps * key value^T injected at t0 is carried forward by
``dS <- alpha (I - beta k k^T) dS`` (the additive write cancels between the
native and perturbed runs, so this is exact within the layer).  Its effect on
token ``tok`` at the read position is modelled as

    dlogit ~= G * <key, q_t> * <value, u_tok>

with ``u_tok`` the head-output direction that feeds ``tok``'s logit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .hosts import ForwardTrace, HostModel, WriteEvent, add_to_state, forward


@dataclass(frozen=True)
class PerturbationSpec:
    cell: tuple[int, int]
    position: int
    eps: float
    key: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.eps):
            raise ValueError("eps must be finite")
        for name in ("key", "value"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError(f"{name} factor must be unit norm")
            object.__setattr__(self, name, v)

    @property
    def delta(self) -> np.ndarray:
        return self.eps * np.outer(self.key, self.value)


def propagate_perturbation(delta0: np.ndarray, events: Sequence[WriteEvent]) -> np.ndarray:
    """Exact carry of a state perturbation through later writes of the same head."""
    dS = np.array(delta0, dtype=np.float64)
    for e in events:
        if e.k.shape[0] != dS.shape[0]:
            raise ShapeError("event key does not match perturbation rows")
        dS = e.alpha * (dS - e.beta * np.outer(e.k, e.k @ dS))
    return dS


def trace_events(trace: ForwardTrace, cell: tuple[int, int], start: int, stop: int) -> list[WriteEvent]:
    """Write events of ``cell`` at positions start..stop-1."""
    layer, head = cell
    return [trace.event(t, layer, head) for t in range(start, stop)]


def gate_product(trace: ForwardTrace, cell: tuple[int, int], t0: int, t: int) -> float:
    """prod of alpha over positions t0+1..t."""
    layer, head = cell
    return float(np.prod(trace.alpha[t0 + 1:t + 1, layer, head]))


def predict_logit_delta(G: float, key, q, value, u_tok) -> float:
    return float(G * np.dot(key, q) * np.dot(value, u_tok))


def direct_readout(model: HostModel, cell: tuple[int, int], tokens: Sequence[int]) -> np.ndarray:
    """u_tok = W_O[head] @ W_U[tok], rows per token, shape (n_tok, head_dim)."""
    layer, head = cell
    return model.params["unembed"][np.asarray(tokens)] @ model.head_readout(layer, head).T


def jacobian_readout(model: HostModel, tokens, cell: tuple[int, int], t: int,
                     eval_tokens: Sequence[int], h: float = 1e-5,
                     base: ForwardTrace | None = None) -> np.ndarray:
    """d logit_tok / d o_t for the head's output at position ``t`` (central differences).

    The head output is moved by ``h`` along each basis direction by adding
    ``q_t e_j^T h / |q_t|^2`` to the state after the write at ``t``.
    """
    layer, head = cell
    base = base or forward(model, tokens)
    q = base.queries[t, layer, head]
    qq = float(q @ q)
    hd = base.values.shape[-1]
    eval_tokens = np.asarray(eval_tokens)
    J = np.empty((len(eval_tokens), hd))
    for j in range(hd):
        e = np.zeros(hd)
        e[j] = h / qq
        plus = forward(model, tokens, [add_to_state(t, layer, head, np.outer(q, e))], resume=(base, t))
        minus = forward(model, tokens, [add_to_state(t, layer, head, -np.outer(q, e))], resume=(base, t))
        J[:, j] = (plus.logits[t, eval_tokens] - minus.logits[t, eval_tokens]) / (2 * h)
    return J


def measure_logit_delta(model: HostModel, tokens, spec: PerturbationSpec, tok,
                        eval_pos: int | None = None, base: ForwardTrace | None = None):
    """Logit change of ``tok`` (scalar or array of ids) at ``eval_pos`` (default: last)."""
    tokens = np.asarray(tokens)
    t = len(tokens) - 1 if eval_pos is None else eval_pos
    if spec.position > t:
        raise ValueError("perturbation position is after the evaluation position")
    base = base or forward(model, tokens)
    if spec.eps == 0:
        return np.zeros(np.shape(tok)) if np.ndim(tok) else 0.0
    layer, head = spec.cell
    pert = forward(model, tokens, [add_to_state(spec.position, layer, head, spec.delta)],
                   resume=(base, spec.position))
    d = pert.logits[t, tok] - base.logits[t, tok]
    return d if np.ndim(tok) else float(d)


@dataclass(frozen=True)
class GFit:
    feature: int
    G: float
    G_alpha: float
    r2: float
    r2_analytic: float
    n: int
    degenerate: bool = False


def _r2(y: np.ndarray, yhat: np.ndarray) -> float:
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else float("-inf")
    return 1.0 - ss_res / ss_tot


def fit_G(measured, products, G_alpha: float = float("nan"), feature: int = -1) -> GFit:
    """Least-squares scalar G for measured ~= G * products, with R^2.

    ``r2_analytic`` scores the same form with G fixed at ``G_alpha``.
    """
    y = np.asarray(measured, dtype=np.float64)
    x = np.asarray(products, dtype=np.float64)
    if len(y) != len(x) or len(y) < 2:
        raise ValueError("fit_G needs at least two aligned points")
    sxx = float(x @ x)
    if sxx == 0:
        return GFit(feature, float("nan"), G_alpha, float("nan"), float("nan"), len(y), True)
    G = float(x @ y) / sxx
    r2a = _r2(y, G_alpha * x) if np.isfinite(G_alpha) else float("nan")
    return GFit(feature, G, G_alpha, min(1.0, _r2(y, G * x)), r2a, len(y))


def eval_token_set(logits: np.ndarray, n_top: int = 5, n_random: int = 5, seed: int = 0) -> np.ndarray:
    """Top-``n_top`` tokens by baseline logit plus ``n_random`` others drawn at random."""
    order = np.argsort(-logits, kind="stable")
    top = order[:n_top]
    rest = order[n_top:]
    rng = np.random.default_rng(seed)
    extra = rng.choice(rest, size=min(n_random, len(rest)), replace=False)
    return np.concatenate([top, np.sort(extra)])


def fit_feature_sequence(model: HostModel, tokens, cell: tuple[int, int], t0: int,
                         key: np.ndarray, value: np.ndarray, eps: float, feature: int = -1,
                         eval_pos: int | None = None, readout: str = "jacobian",
                         eval_tokens: Sequence[int] | None = None, seed: int = 0) -> GFit:
    """Inject eps * key value^T at ``t0``, measure logit changes over the eval-token
    set at ``eval_pos`` and fit G against <key, q><value, u_tok>."""
    tokens = np.asarray(tokens)
    t = len(tokens) - 1 if eval_pos is None else eval_pos
    base = forward(model, tokens)
    layer, head = cell
    key = np.asarray(key, float) / np.linalg.norm(key)
    value = np.asarray(value, float) / np.linalg.norm(value)
    if eval_tokens is None:
        eval_tokens = eval_token_set(base.logits[t], seed=seed)
    eval_tokens = np.asarray(eval_tokens)
    if readout == "jacobian":
        U = jacobian_readout(model, tokens, cell, t, eval_tokens, base=base)
    elif readout == "direct":
        U = direct_readout(model, cell, eval_tokens)
    else:
        raise ValueError("readout must be 'jacobian' or 'direct'")
    q = base.queries[t, layer, head]
    products = float(key @ q) * (U @ value)
    spec = PerturbationSpec(cell, t0, eps, key, value)
    measured = measure_logit_delta(model, tokens, spec, eval_tokens, t, base)
    return fit_G(measured, products, eps * gate_product(base, cell, t0, t), feature)
