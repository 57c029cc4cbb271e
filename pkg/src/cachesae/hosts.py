"""Recurrent write-rule engines and a small recurrent language model built on them.

Three write rules are supported:

``gated_delta``
    S' = alpha (I - beta k k^T) S + beta k v^T, read-after-write o = S'^T q.
``delta_ungated``
    The same update with the forget gate pinned to alpha = 1.
``diagonal_ssm``
    s' = decay * s + dt B x with a per-coordinate decay; the state is kept as a
    (d_state, 1) matrix so every downstream tool sees one matrix shape.

The reference path is float64 NumPy.  Training runs the identical network in
torch (see :func:`train_toy_host`) and copies the weights back.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError, ShapeError, TokenError, TrainingError

WRITE_RULES = ("gated_delta", "delta_ungated", "diagonal_ssm")
_NORM_EPS = 1e-6
_L2_EPS = 1e-8


@dataclass(frozen=True)
class HostConfig:
    write_rule: str = "gated_delta"
    n_layers: int = 2
    n_heads: int = 2
    d_k: int = 16
    d_v: int = 16
    d_model: int = 64
    vocab_size: int = 64
    seed: int = 0
    d_mlp: int = 128
    use_mlp: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.write_rule not in WRITE_RULES:
            raise ConfigError(f"unknown write rule {self.write_rule!r}")
        for name in ("n_layers", "n_heads", "d_k", "d_v", "d_model", "vocab_size", "d_mlp"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def is_ssm(self) -> bool:
        return self.write_rule == "diagonal_ssm"

    @property
    def head_dim(self) -> int:
        """Width of one head's read-out (1 for the diagonal SSM)."""
        return 1 if self.is_ssm else self.d_v

    @property
    def state_shape(self) -> tuple[int, int]:
        return (self.d_k, self.head_dim)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "HostConfig":
        return cls(**d)


@dataclass(frozen=True)
class WriteEvent:
    """One token's write tuple for a single (layer, head) cell.

    For the diagonal SSM, ``k`` holds ``dt * B``, ``v`` holds the scalar input
    ``x`` as a length-1 vector, ``q`` holds ``C``, ``beta`` is 1 and ``alpha``
    is the geometric mean of the per-coordinate decay.
    """

    k: np.ndarray
    v: np.ndarray
    q: np.ndarray
    alpha: float
    beta: float
    seq_id: int = 0
    position: int = 0

    def __post_init__(self):
        for name in ("k", "v", "q"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1:
                raise ShapeError(f"{name} must be a vector, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite entries in {name}")
            object.__setattr__(self, name, arr)
        if not (np.isfinite(self.alpha) and 0.0 < self.alpha <= 1.0):
            raise NumericError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not (np.isfinite(self.beta) and 0.0 <= self.beta <= 1.0):
            raise NumericError(f"beta must lie in [0, 1], got {self.beta}")
        if self.q.shape != self.k.shape:
            raise ShapeError("q and k must share the key dimension")

    def native_write(self) -> np.ndarray:
        return self.beta * np.outer(self.k, self.v)


def gdn_step(S: np.ndarray, e: WriteEvent, gated: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Apply one gated delta-rule write and read the result with ``e.q``.

    Returns ``(S_new, o)`` with ``o = S_new^T q``.  ``gated=False`` runs the
    ungated DeltaNet variant (alpha taken as 1).
    """
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (e.k.shape[0], e.v.shape[0]):
        raise ShapeError(f"state {S.shape} does not match k {e.k.shape} / v {e.v.shape}")
    if not np.all(np.isfinite(S)):
        raise NumericError("non-finite state")
    alpha = e.alpha if gated else 1.0
    kS = e.k @ S
    S_new = alpha * (S - e.beta * np.outer(e.k, kS)) + e.beta * np.outer(e.k, e.v)
    return S_new, S_new.T @ e.q


def diag_ssm_step(s, B, x: float, dt: float, decay) -> np.ndarray:
    """Diagonal state update ``s' = decay * s + dt * B * x``."""
    s = np.asarray(s, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    decay = np.asarray(decay, dtype=np.float64)
    if s.shape != B.shape or s.shape != decay.shape or s.ndim != 1:
        raise ShapeError(f"shape mismatch: s {s.shape}, B {B.shape}, decay {decay.shape}")
    vals = np.concatenate([s, B, decay, [x, dt]])
    if not np.all(np.isfinite(vals)):
        raise NumericError("non-finite input to diag_ssm_step")
    if np.any(decay <= 0) or np.any(decay > 1):
        raise NumericError("decay entries must lie in (0, 1]")
    return decay * s + dt * B * x


# ----------------------------------------------------------------------------
# model
# ----------------------------------------------------------------------------


def _layer_param_shapes(cfg: HostConfig) -> dict[str, tuple[int, ...]]:
    H, dk, dm = cfg.n_heads, cfg.d_k, cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {"norm_mix": (dm,)}
    if cfg.is_ssm:
        shapes.update(
            W_B=(H, dk, dm), W_C=(H, dk, dm), w_x=(H, dm), w_dt=(H, dm),
            b_dt=(H,), A_log=(H, dk), W_O=(H, 1, dm),
        )
    else:
        dv = cfg.d_v
        shapes.update(
            W_q=(H, dk, dm), W_k=(H, dk, dm), W_v=(H, dv, dm), w_a=(H, dm),
            A_log=(H,), b_dt=(H,), w_b=(H, dm), b_b=(H,), W_O=(H, dv, dm),
        )
    if cfg.use_mlp:
        shapes.update(norm_mlp=(dm,), W_1=(cfg.d_mlp, dm), b_1=(cfg.d_mlp,),
                      W_2=(dm, cfg.d_mlp), b_2=(dm,))
    return shapes


def param_shapes(cfg: HostConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"embed": (cfg.vocab_size, cfg.d_model), "unembed": (cfg.vocab_size, cfg.d_model)}
    for layer in range(cfg.n_layers):
        for name, shape in _layer_param_shapes(cfg).items():
            shapes[f"layers.{layer}.{name}"] = shape
    return shapes


def _softplus_inv(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


def init_params(cfg: HostConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    dm, H = cfg.d_model, cfg.n_heads
    p: dict[str, np.ndarray] = {
        "embed": rng.normal(0.0, 1.0, (cfg.vocab_size, dm)),
        "unembed": rng.normal(0.0, 0.02, (cfg.vocab_size, dm)),
    }
    s_in = 1.0 / np.sqrt(dm)
    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}."
        p[pre + "norm_mix"] = np.ones(dm)
        if cfg.is_ssm:
            ds = cfg.d_k
            p[pre + "W_B"] = rng.normal(0, s_in, (H, ds, dm))
            p[pre + "W_C"] = rng.normal(0, s_in, (H, ds, dm))
            p[pre + "w_x"] = rng.normal(0, s_in, (H, dm))
            p[pre + "w_dt"] = rng.normal(0, 0.1 * s_in, (H, dm))
            p[pre + "b_dt"] = _softplus_inv(np.geomspace(0.02, 0.1, H))
            p[pre + "A_log"] = np.tile(np.log(np.arange(1, ds + 1, dtype=np.float64)), (H, 1))
            p[pre + "W_O"] = rng.normal(0, 0.5 / np.sqrt(H), (H, 1, dm))
        else:
            dk, dv = cfg.d_k, cfg.d_v
            p[pre + "W_q"] = rng.normal(0, s_in, (H, dk, dm))
            p[pre + "W_k"] = rng.normal(0, s_in, (H, dk, dm))
            p[pre + "W_v"] = rng.normal(0, s_in, (H, dv, dm))
            p[pre + "w_a"] = rng.normal(0, 0.1 * s_in, (H, dm))
            p[pre + "A_log"] = np.zeros(H)
            p[pre + "b_dt"] = _softplus_inv(np.linspace(0.1, 0.7, H))
            p[pre + "w_b"] = rng.normal(0, s_in, (H, dm))
            p[pre + "b_b"] = np.zeros(H)
            p[pre + "W_O"] = rng.normal(0, 0.5 / np.sqrt(dv * H), (H, dv, dm))
        if cfg.use_mlp:
            p[pre + "norm_mlp"] = np.ones(dm)
            p[pre + "W_1"] = rng.normal(0, s_in, (cfg.d_mlp, dm))
            p[pre + "b_1"] = np.zeros(cfg.d_mlp)
            p[pre + "W_2"] = rng.normal(0, 0.5 / np.sqrt(cfg.d_mlp), (dm, cfg.d_mlp))
            p[pre + "b_2"] = np.zeros(dm)
    return p


@dataclass(frozen=True)
class HostModel:
    """Immutable parameter bundle; ``meta`` carries training losses."""

    config: HostConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = set(expected) ^ set(self.params)
            raise ShapeError(f"parameter set mismatch: {sorted(missing)[:5]}")
        dtype = np.float64 if self.config.dtype == "float64" else np.float32
        frozen = {}
        for name, shape in expected.items():
            arr = np.array(self.params[name], dtype=dtype)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arr.shape}")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    def layer(self, layer: int, name: str) -> np.ndarray:
        return self.params[f"layers.{layer}.{name}"]

    @property
    def dtype(self):
        return np.float64 if self.config.dtype == "float64" else np.float32

    def with_params(self, **updates: np.ndarray) -> "HostModel":
        params = dict(self.params)
        params.update(updates)
        return replace(self, params=params)

    def head_readout(self, layer: int, head: int) -> np.ndarray:
        """W_O for one head, shape (head_dim, d_model)."""
        return self.layer(layer, "W_O")[head]

    def save(self, path) -> None:
        import json

        arrays = {f"p:{k}": v for k, v in self.params.items()}
        np.savez(path, __config__=np.array(json.dumps(self.config.to_dict())),
                 __meta__=np.array(json.dumps(self.meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "HostModel":
        import json

        with np.load(path, allow_pickle=False) as z:
            cfg = HostConfig.from_dict(json.loads(str(z["__config__"])))
            meta = json.loads(str(z["__meta__"]))
            params = {k[2:]: z[k] for k in z.files if k.startswith("p:")}
        return cls(cfg, params, meta)


def init_host(config: HostConfig) -> HostModel:
    return HostModel(config, init_params(config), {"steps": 0})


def linear_readout_host(d_k: int = 8, d_v: int = 8, d_model: int = 16, vocab_size: int = 16,
                        n_heads: int = 1, seed: int = 0, write_gate_bias: float = 0.0,
                        gate_scale: float = 1.0) -> HostModel:
    """One-layer host without MLP, so logits are linear in every head output.

    ``write_gate_bias=-inf`` closes the write gate (beta = 0) at every position.
    """
    cfg = HostConfig("gated_delta", n_layers=1, n_heads=n_heads, d_k=d_k, d_v=d_v,
                     d_model=d_model, vocab_size=vocab_size, seed=seed, use_mlp=False)
    params = init_params(cfg)
    rng = np.random.default_rng(seed + 7919)
    params["unembed"] = rng.normal(0.0, 1.0 / np.sqrt(d_model), (vocab_size, d_model))
    params["layers.0.W_O"] = rng.normal(0.0, 1.0 / np.sqrt(d_v), (n_heads, d_v, d_model))
    params["layers.0.b_b"] = np.full(n_heads, write_gate_bias)
    params["layers.0.A_log"] = np.full(n_heads, np.log(gate_scale))
    return HostModel(cfg, params, {"constructed": "linear_readout"})


# ----------------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CachePatch:
    """Post-write edit of one head's state: ``S <- fn(S, event)``.

    Applied after the native write at ``position`` and before the read, so the
    head output at ``position`` already sees the edited state.
    """

    position: int
    layer: int
    head: int
    fn: Callable[[np.ndarray, WriteEvent], np.ndarray]


def replace_write(position: int, layer: int, head: int, delta: np.ndarray) -> CachePatch:
    """Swap the native write for ``delta``: ``S <- S - beta k v^T + delta``."""
    delta = np.asarray(delta, dtype=np.float64)
    return CachePatch(position, layer, head, lambda S, e: S - e.native_write() + delta)


def add_to_state(position: int, layer: int, head: int, delta: np.ndarray) -> CachePatch:
    delta = np.asarray(delta, dtype=np.float64)
    return CachePatch(position, layer, head, lambda S, e: S + delta)


def rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS) * gain


def _l2n(x: np.ndarray) -> np.ndarray:
    return x / (np.linalg.norm(x, axis=-1, keepdims=True) + _L2_EPS)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass
class _Proj:
    k: np.ndarray       # (L, H, dk)
    v: np.ndarray       # (L, H, head_dim)
    q: np.ndarray       # (L, H, dk)
    alpha: np.ndarray   # (L, H)
    beta: np.ndarray    # (L, H)
    decay: np.ndarray | None  # (L, H, dk) for the diagonal SSM


def _project(model: HostModel, layer: int, h: np.ndarray) -> _Proj:
    cfg = model.config
    P = lambda name: model.layer(layer, name)  # noqa: E731
    if cfg.is_ssm:
        B = np.einsum("hsd,ld->lhs", P("W_B"), h)
        C = np.einsum("hsd,ld->lhs", P("W_C"), h)
        x = h @ P("w_x").T
        dt = _softplus(h @ P("w_dt").T + P("b_dt"))
        log_decay = -dt[..., None] * np.exp(P("A_log"))[None]
        decay = np.exp(log_decay)
        alpha = np.exp(log_decay.mean(axis=-1))
        return _Proj(dt[..., None] * B, x[..., None], C, alpha, np.ones_like(alpha), decay)
    k = _l2n(np.einsum("hkd,ld->lhk", P("W_k"), h))
    q = _l2n(np.einsum("hkd,ld->lhk", P("W_q"), h))
    v = np.einsum("hvd,ld->lhv", P("W_v"), h)
    if cfg.write_rule == "delta_ungated":
        alpha = np.ones(k.shape[:2])
    else:
        g = -np.exp(P("A_log")) * _softplus(h @ P("w_a").T + P("b_dt"))
        alpha = np.exp(g)
    beta = expit(h @ P("w_b").T + P("b_b"))
    return _Proj(k, v, q, alpha, beta, None)


def _step_heads(S: np.ndarray, k, v, alpha, beta, decay) -> np.ndarray:
    """Vectorised write for all heads of one layer at one position."""
    if decay is not None:
        return decay[:, :, None] * S + k[:, :, None] * v[:, None, :]
    kS = np.einsum("hk,hkv->hv", k, S)
    b = beta[:, None, None]
    return alpha[:, None, None] * (S - b * k[:, :, None] * kS[:, None, :]) + b * k[:, :, None] * v[:, None, :]


def _mlp(model: HostModel, layer: int, x: np.ndarray) -> np.ndarray:
    P = lambda name: model.layer(layer, name)  # noqa: E731
    h = rmsnorm(x, P("norm_mlp"))
    return _gelu(h @ P("W_1").T + P("b_1")) @ P("W_2").T + P("b_2")


@dataclass(frozen=True)
class ForwardTrace:
    """Everything one forward pass computed.

    Arrays are indexed ``[position, layer, head, ...]``; ``resid[l]`` is the
    input of layer ``l`` and ``resid[n_layers]`` feeds the unembedding.
    """

    tokens: np.ndarray
    states: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    outputs: np.ndarray
    resid: np.ndarray
    logits: np.ndarray
    decay: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    def event(self, t: int, layer: int, head: int, seq_id: int = 0) -> WriteEvent:
        return WriteEvent(self.keys[t, layer, head], self.values[t, layer, head],
                          self.queries[t, layer, head], float(self.alpha[t, layer, head]),
                          float(self.beta[t, layer, head]), seq_id, t)

    def native_write(self, t: int, layer: int, head: int) -> np.ndarray:
        return self.beta[t, layer, head] * np.outer(self.keys[t, layer, head], self.values[t, layer, head])

    def log_probs(self, t: int = -1) -> np.ndarray:
        z = self.logits[t]
        return z - _logsumexp(z)

    def probs(self, t: int = -1) -> np.ndarray:
        return np.exp(self.log_probs(t))


def _logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z - _logsumexp(z)[..., None]


def _check_tokens(model: HostModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise TokenError("tokens must be a non-empty 1-D sequence")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TokenError("tokens must be integers")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise TokenError(f"token out of range [0, {model.config.vocab_size})")
    return tokens.astype(np.int64)


def _group_patches(patches: Iterable[CachePatch] | None) -> dict[tuple[int, int], list[CachePatch]]:
    grouped: dict[tuple[int, int], list[CachePatch]] = {}
    for p in patches or ():
        grouped.setdefault((p.position, p.layer), []).append(p)
    return grouped


def forward(model: HostModel, tokens, patches: Sequence[CachePatch] | None = None,
            resume: tuple[ForwardTrace, int] | None = None) -> ForwardTrace:
    """Run the model over ``tokens`` and return the full trace.

    ``patches`` edit per-head states after their native write.  ``resume=(base,
    t0)`` reuses ``base`` for positions before ``t0`` (valid only when every
    patch sits at a position >= t0 and ``base`` ran on the same tokens); each
    call works on private copies, so ``base`` is never modified.
    """
    tokens = _check_tokens(model, tokens)
    cfg = model.config
    L, nl, H = len(tokens), cfg.n_layers, cfg.n_heads
    dk, hd, dm = cfg.d_k, cfg.head_dim, cfg.d_model
    grouped = _group_patches(patches)
    t0 = 0
    if resume is not None:
        base, t0 = resume
        if not np.array_equal(base.tokens, tokens):
            raise TokenError("resume trace was computed on different tokens")
        if any(pos < t0 for pos, _ in grouped):
            raise ValueError("patch position precedes the resume point")
    if any(not 0 <= pos < L for pos, _ in grouped):
        raise ValueError("patch position outside the sequence")

    dt = np.float64
    states = np.empty((L, nl, H, dk, hd), dt)
    keys = np.empty((L, nl, H, dk), dt)
    values = np.empty((L, nl, H, hd), dt)
    queries = np.empty((L, nl, H, dk), dt)
    alpha = np.empty((L, nl, H), dt)
    beta = np.empty((L, nl, H), dt)
    outputs = np.empty((L, nl, H, hd), dt)
    resid = np.empty((nl + 1, L, dm), dt)
    decay = np.empty((L, nl, H, dk), dt) if cfg.is_ssm else None
    if t0 > 0:
        for arr, src in ((states, base.states), (keys, base.keys), (values, base.values),
                         (queries, base.queries), (alpha, base.alpha), (beta, base.beta),
                         (outputs, base.outputs)):
            arr[:t0] = src[:t0]
        resid[:, :t0] = base.resid[:, :t0]
        if decay is not None:
            decay[:t0] = base.decay[:t0]

    # Projections and readouts always run over the full sequence so that a
    # resumed run performs the same BLAS calls, and so matches bit for bit.
    resid[0] = model.params["embed"][tokens]
    for layer in range(nl):
        x = resid[layer].copy()
        pr = _project(model, layer, rmsnorm(x, model.layer(layer, "norm_mix")))
        S = states[t0 - 1, layer].copy() if t0 > 0 else np.zeros((H, dk, hd))
        for t in range(t0, L):
            S = _step_heads(S, pr.k[t], pr.v[t], pr.alpha[t], pr.beta[t],
                            None if pr.decay is None else pr.decay[t])
            for p in grouped.get((t, layer), ()):
                ev = WriteEvent(pr.k[t, p.head], pr.v[t, p.head], pr.q[t, p.head],
                                float(pr.alpha[t, p.head]), float(pr.beta[t, p.head]), 0, t)
                S = S.copy()
                S[p.head] = p.fn(S[p.head].copy(), ev)
            states[t, layer] = S
        keys[t0:, layer], values[t0:, layer], queries[t0:, layer] = pr.k[t0:], pr.v[t0:], pr.q[t0:]
        alpha[t0:, layer], beta[t0:, layer] = pr.alpha[t0:], pr.beta[t0:]
        if decay is not None:
            decay[t0:, layer] = pr.decay[t0:]
        out = np.einsum("lhkv,lhk->lhv", states[:, layer], pr.q)
        outputs[t0:, layer] = out[t0:]
        x = x + np.einsum("lhv,hvd->ld", out, model.layer(layer, "W_O"))
        if cfg.use_mlp:
            x = x + _mlp(model, layer, x)
        resid[layer + 1, t0:] = x[t0:]

    logits = np.empty((L, cfg.vocab_size), dt)
    if t0 > 0:
        logits[:t0] = base.logits[:t0]
    logits[t0:] = (resid[nl] @ model.params["unembed"].T)[t0:]
    if not np.all(np.isfinite(logits[t0:])):
        raise NumericError("non-finite logits")
    return ForwardTrace(tokens, states, keys, values, queries, alpha, beta, outputs, resid,
                        logits, decay)


# ----------------------------------------------------------------------------
# incremental decoding
# ----------------------------------------------------------------------------

EditHook = Callable[[int], Sequence[CachePatch]]


def _step_token(model: HostModel, S: np.ndarray, token: int, position: int,
                patches: Sequence[CachePatch]) -> tuple[np.ndarray, np.ndarray]:
    """Advance every layer by one token; returns (new states, logits)."""
    cfg = model.config
    grouped = _group_patches(patches)
    x = model.params["embed"][[token]]
    S_new = np.empty_like(S)
    for layer in range(cfg.n_layers):
        pr = _project(model, layer, rmsnorm(x, model.layer(layer, "norm_mix")))
        St = _step_heads(S[layer], pr.k[0], pr.v[0], pr.alpha[0], pr.beta[0],
                         None if pr.decay is None else pr.decay[0])
        for p in grouped.get((position, layer), ()):
            ev = WriteEvent(pr.k[0, p.head], pr.v[0, p.head], pr.q[0, p.head],
                            float(pr.alpha[0, p.head]), float(pr.beta[0, p.head]), 0, position)
            St = St.copy()
            St[p.head] = p.fn(St[p.head].copy(), ev)
        S_new[layer] = St
        out = np.einsum("hkv,hk->hv", St, pr.q[0])
        x = x + np.einsum("hv,hvd->d", out, model.layer(layer, "W_O"))[None]
        if cfg.use_mlp:
            x = x + _mlp(model, layer, x)
    logits = (x @ model.params["unembed"].T)[0]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return S_new, logits


def generate_greedy(model: HostModel, prompt, n: int, edit: EditHook | None = None,
                    return_logits: bool = False):
    """Greedy argmax continuation of ``prompt`` for ``n`` tokens.

    ``edit(position)`` may return cache patches for that position; they apply
    while the prompt is consumed and while each generated token is written.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    prompt = _check_tokens(model, prompt)
    cfg = model.config
    S = np.zeros((cfg.n_layers, cfg.n_heads) + cfg.state_shape)
    logits = None
    step_logits = []
    for pos, tok in enumerate(prompt):
        S, logits = _step_token(model, S, int(tok), pos, edit(pos) if edit else ())
    out = []
    pos = len(prompt)
    for i in range(n):
        step_logits.append(logits)
        nxt = int(np.argmax(logits))
        out.append(nxt)
        if i == n - 1:
            break
        S, logits = _step_token(model, S, nxt, pos, edit(pos) if edit else ())
        pos += 1
    tokens = np.array(out, dtype=np.int64)
    if return_logits:
        return tokens, np.array(step_logits)
    return tokens


# ----------------------------------------------------------------------------
# training (torch mirror of the NumPy forward)
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class HostTrainConfig:
    lr: float = 3e-3
    min_lr: float = 3e-4
    warmup: int = 50
    batch: int = 32
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    val_fraction: float = 0.1


def _torch_forward(params, cfg: HostConfig, tokens):
    import torch
    import torch.nn.functional as F

    B, L = tokens.shape
    H, dk, hd = cfg.n_heads, cfg.d_k, cfg.head_dim
    x = params["embed"][tokens]

    def rms(z, g):
        return z / torch.sqrt(torch.mean(z * z, dim=-1, keepdim=True) + _NORM_EPS) * g

    for layer in range(cfg.n_layers):
        P = lambda name: params[f"layers.{layer}.{name}"]  # noqa: E731
        h = rms(x, P("norm_mix"))
        if cfg.is_ssm:
            Bm = torch.einsum("hsd,bld->blhs", P("W_B"), h)
            C = torch.einsum("hsd,bld->blhs", P("W_C"), h)
            xs = h @ P("w_x").T
            dt = F.softplus(h @ P("w_dt").T + P("b_dt"))
            decay = torch.exp(-dt[..., None] * torch.exp(P("A_log")))
            k, v, q = dt[..., None] * Bm, xs[..., None], C
        else:
            k = torch.einsum("hkd,bld->blhk", P("W_k"), h)
            k = k / (k.norm(dim=-1, keepdim=True) + _L2_EPS)
            q = torch.einsum("hkd,bld->blhk", P("W_q"), h)
            q = q / (q.norm(dim=-1, keepdim=True) + _L2_EPS)
            v = torch.einsum("hvd,bld->blhv", P("W_v"), h)
            if cfg.write_rule == "delta_ungated":
                alpha = torch.ones(k.shape[:3], dtype=k.dtype)
            else:
                g = -torch.exp(P("A_log")) * F.softplus(h @ P("w_a").T + P("b_dt"))
                alpha = torch.exp(g)
            beta = torch.sigmoid(h @ P("w_b").T + P("b_b"))
        S = torch.zeros(B, H, dk, hd, dtype=x.dtype)
        outs = []
        for t in range(L):
            if cfg.is_ssm:
                S = decay[:, t, :, :, None] * S + k[:, t, :, :, None] * v[:, t, :, None, :]
            else:
                kt = k[:, t]
                kS = torch.einsum("bhk,bhkv->bhv", kt, S)
                b = beta[:, t, :, None, None]
                S = alpha[:, t, :, None, None] * (S - b * kt[..., None] * kS[:, :, None, :]) \
                    + b * kt[..., None] * v[:, t, :, None, :]
            outs.append(torch.einsum("bhkv,bhk->bhv", S, q[:, t]))
        out = torch.stack(outs, dim=1)
        x = x + torch.einsum("blhv,hvd->bld", out, P("W_O"))
        if cfg.use_mlp:
            hm = rms(x, P("norm_mlp"))
            x = x + F.gelu(hm @ P("W_1").T + P("b_1"), approximate="tanh") @ P("W_2").T + P("b_2")
    return x @ params["unembed"].T


def torch_logits(model: HostModel, tokens) -> np.ndarray:
    """Logits from the torch mirror (used to cross-check the NumPy path)."""
    import torch

    params = {k: torch.from_numpy(np.array(v, dtype=np.float64)) for k, v in model.params.items()}
    toks = torch.as_tensor(np.atleast_2d(tokens), dtype=torch.long)
    with torch.no_grad():
        return _torch_forward(params, model.config, toks).numpy()


def _cross_entropy(model_params, cfg, batch):
    import torch.nn.functional as F

    logits = _torch_forward(model_params, cfg, batch[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))


def train_toy_host(config: HostConfig, corpus, budget: int,
                   train_cfg: HostTrainConfig | None = None, log_every: int = 0) -> HostModel:
    """Train a host by Adam on next-token cross-entropy.

    ``corpus`` is an integer array (n_seq, length) or a list of equal-length
    sequences.  The last ``val_fraction`` of sequences (after a seeded shuffle)
    are held out.  Deterministic given ``config.seed``.
    """
    import torch

    tc = train_cfg or HostTrainConfig()
    data = np.asarray(corpus, dtype=np.int64)
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] < 2:
        raise ValueError("corpus must be a non-empty (n_seq, length>=2) array")
    if data.min() < 0 or data.max() >= config.vocab_size:
        raise TokenError("corpus token out of range")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(data))
    n_val = int(round(tc.val_fraction * len(data))) if len(data) > 1 else 0
    val, train = data[order[:n_val]], data[order[n_val:]]
    if len(train) == 0:
        train = val

    torch.manual_seed(config.seed)
    tdtype = torch.float64 if config.dtype == "float64" else torch.float32
    model = init_host(config)
    params = {k: torch.tensor(np.asarray(v), dtype=tdtype, requires_grad=True)
              for k, v in model.params.items()}
    opt = torch.optim.Adam(params.values(), lr=tc.lr, weight_decay=tc.weight_decay)

    def lr_at(step: int) -> float:
        if step < tc.warmup:
            return tc.lr * (step + 1) / tc.warmup
        frac = (step - tc.warmup) / max(1, budget - tc.warmup)
        return tc.min_lr + 0.5 * (tc.lr - tc.min_lr) * (1 + np.cos(np.pi * min(frac, 1.0)))

    def evaluate(arr) -> float:
        if len(arr) == 0:
            return float("nan")
        with torch.no_grad():
            losses = [float(_cross_entropy(params, config, torch.from_numpy(arr[i:i + 64])))
                      * len(arr[i:i + 64]) for i in range(0, len(arr), 64)]
        return sum(losses) / len(arr)

    train_loss = float("nan")
    for step in range(budget):
        idx = rng.integers(0, len(train), size=min(tc.batch, len(train)))
        for group in opt.param_groups:
            group["lr"] = lr_at(step)
        loss = _cross_entropy(params, config, torch.from_numpy(train[idx]))
        if not torch.isfinite(loss):
            raise TrainingError("host loss diverged", step)
        opt.zero_grad()
        loss.backward()
        if tc.grad_clip:
            torch.nn.utils.clip_grad_norm_(list(params.values()), tc.grad_clip)
        opt.step()
        train_loss = loss.item()
        if log_every and step % log_every == 0:
            print(f"host step {step}: loss {train_loss:.4f}")

    trained = {k: v.detach().numpy().astype(np.float64) for k, v in params.items()}
    meta = {"steps": int(budget), "train_loss": evaluate(train), "val_loss": evaluate(val),
            "last_batch_loss": train_loss}
    return HostModel(config, trained, meta)
