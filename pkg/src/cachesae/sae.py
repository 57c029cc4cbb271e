"""Sparse dictionaries whose atoms live in the cache's own matrix shape.

Decoders: ``rank1`` (atom = key ⊗ value), ``rank2`` (sum of two outer
products) and ``flat`` (an unconstrained d_k*d_v column).  Encoders:
``dense`` (linear on vec(S - M) plus bias), ``bilinear`` (matched filter
key_i^T (S - M) value_i with its own factors), ``tied`` (matched filter with
the decoder's factors) and ``bilinear_flat`` (bilinear encoder, flat decoder).

``key`` factors have length d_k and ``value`` factors length d_v, matching a
native write beta * k v^T.

Training runs in torch; a trained :class:`Dictionary` is plain NumPy.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .capture import CaptureDataset
from .errors import (ConfigError, MagicError, ShapeError, StateError, TrainingError,
                     TruncationError, VersionError)

DECODERS = ("rank1", "rank2", "flat")
ENCODERS = ("dense", "bilinear", "tied", "bilinear_flat")
SPARSITY = ("topk", "batchtopk", "jumprelu")

# named encoder/decoder combinations used in the encoder-swap comparison
VARIANTS = {
    "flat": ("flat", "dense"),
    "rank1": ("rank1", "dense"),
    "bilinear": ("rank1", "bilinear"),
    "tied": ("rank1", "tied"),
    "bilinear_flat": ("flat", "bilinear_flat"),
    "rank2": ("rank2", "dense"),
}


@dataclass(frozen=True)
class SparsityRule:
    kind: str = "topk"
    k: int = 4
    theta: np.ndarray | None = None  # per-atom thresholds for jumprelu

    def __post_init__(self):
        if self.kind not in SPARSITY:
            raise ConfigError(f"unknown sparsity rule {self.kind!r}")
        if self.kind != "jumprelu" and self.k < 1:
            raise ConfigError("k must be >= 1")


def _stable_topk_mask(a: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; lower index wins ties."""
    order = np.argsort(-a, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(a.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def apply_sparsity(a: np.ndarray, rule: SparsityRule) -> np.ndarray:
    """Sparse code from pre-activations ``a`` of shape (n_f,) or (batch, n_f).

    BatchTopK keeps the ``batch * k`` largest ReLU'd entries across the whole
    batch, so a single row behaves like TopK.
    """
    a = np.asarray(a, dtype=np.float64)
    n_f = a.shape[-1]
    if rule.kind == "jumprelu":
        theta = np.zeros(n_f) if rule.theta is None else np.asarray(rule.theta)
        return np.where(a > theta, a, 0.0)
    if rule.k > n_f:
        raise ConfigError(f"k={rule.k} exceeds n_f={n_f}")
    r = np.maximum(a, 0.0)
    if rule.kind == "topk":
        mask = _stable_topk_mask(r, rule.k)
    else:
        flat = r.reshape(-1)
        kk = rule.k * (flat.size // n_f)
        mask = _stable_topk_mask(flat, kk).reshape(r.shape)
    return np.where(mask, r, 0.0)


@dataclass(frozen=True)
class Dictionary:
    decoder: str
    encoder: str
    sparsity: SparsityRule
    mean: np.ndarray                          # (d_k, d_v)
    dec_key: np.ndarray | None = None         # (n_f, r, d_k)
    dec_value: np.ndarray | None = None       # (n_f, r, d_v)
    dec_flat: np.ndarray | None = None        # (n_f, d_k * d_v)
    enc_W: np.ndarray | None = None           # (n_f, d_k * d_v)
    enc_b: np.ndarray | None = None           # (n_f,)
    enc_key: np.ndarray | None = None         # (n_f, d_k)
    enc_value: np.ndarray | None = None       # (n_f, d_v)

    def __post_init__(self):
        if self.decoder not in DECODERS or self.encoder not in ENCODERS:
            raise ConfigError(f"bad decoder/encoder {self.decoder}/{self.encoder}")
        if self.encoder == "tied" and self.decoder != "rank1":
            raise ConfigError("tied encoder needs a rank1 decoder")
        if self.decoder == "flat" and self.encoder == "bilinear":
            raise ConfigError("use bilinear_flat for a bilinear encoder on a flat decoder")
        if self.decoder != "flat" and self.encoder == "bilinear_flat":
            raise ConfigError("bilinear_flat pairs with the flat decoder")
        dk, dv = self.mean.shape
        n_f = self.n_f
        if self.decoder == "flat":
            if self.dec_flat is None or self.dec_flat.shape != (n_f, dk * dv):
                raise ShapeError("flat decoder must be (n_f, d_k*d_v)")
        else:
            r = 1 if self.decoder == "rank1" else 2
            if self.dec_key is None or self.dec_key.shape != (n_f, r, dk) \
                    or self.dec_value is None or self.dec_value.shape != (n_f, r, dv):
                raise ShapeError(f"{self.decoder} factors must be (n_f, {r}, d)")
        if self.encoder == "dense":
            if self.enc_W is None or self.enc_W.shape != (n_f, dk * dv) or self.enc_b.shape != (n_f,):
                raise ShapeError("dense encoder must be (n_f, d_k*d_v) plus bias")
        elif self.encoder in ("bilinear", "bilinear_flat"):
            if self.enc_key is None or self.enc_key.shape != (n_f, dk) \
                    or self.enc_value is None or self.enc_value.shape != (n_f, dv):
                raise ShapeError("bilinear encoder factors must be (n_f, d_k) and (n_f, d_v)")
        if self.sparsity.kind == "jumprelu":
            if self.sparsity.theta is None or np.shape(self.sparsity.theta) != (n_f,):
                raise ShapeError("jumprelu needs one threshold per atom")
        elif self.sparsity.k > n_f:
            raise ConfigError(f"k={self.sparsity.k} exceeds n_f={n_f}")

    @property
    def n_f(self) -> int:
        if self.decoder == "flat":
            return self.dec_flat.shape[0]
        return self.dec_key.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.mean.shape

    @property
    def key(self) -> np.ndarray:
        """Rank-1 key factors (n_f, d_k)."""
        if self.decoder != "rank1":
            raise ConfigError("key factors exist only for rank1 decoders")
        return self.dec_key[:, 0]

    @property
    def value(self) -> np.ndarray:
        if self.decoder != "rank1":
            raise ConfigError("value factors exist only for rank1 decoders")
        return self.dec_value[:, 0]

    def atoms(self) -> np.ndarray:
        """Decoder atoms as matrices, (n_f, d_k, d_v)."""
        if self.decoder == "flat":
            return self.dec_flat.reshape(self.n_f, *self.dims)
        return np.einsum("frk,frv->fkv", self.dec_key, self.dec_value)

    def atom(self, i: int) -> np.ndarray:
        self._check_index(i)
        return self.atoms()[i]

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.n_f:
            raise IndexError(f"feature {i} outside [0, {self.n_f})")

    def _as_batch(self, S) -> tuple[np.ndarray, bool]:
        S = np.asarray(S, dtype=np.float64)
        single = S.ndim == 2
        S = S[None] if single else S
        if S.shape[1:] != self.dims:
            raise ShapeError(f"state shape {S.shape[1:]} does not match {self.dims}")
        return S, single

    def encode(self, S) -> np.ndarray:
        """Pre-activations for one state (d_k, d_v) or a batch (B, d_k, d_v)."""
        S, single = self._as_batch(S)
        X = S - self.mean
        if self.encoder == "dense":
            a = X.reshape(len(X), -1) @ self.enc_W.T + self.enc_b
        elif self.encoder == "tied":
            a = np.einsum("fk,bkv,fv->bf", self.key, X, self.value)
        else:
            a = np.einsum("fk,bkv,fv->bf", self.enc_key, X, self.enc_value)
        return a[0] if single else a

    def code(self, S) -> np.ndarray:
        """Sparse code; a batch is sparsified row by row (TopK semantics)."""
        a = self.encode(S)
        if self.sparsity.kind == "batchtopk":
            return apply_sparsity(a, replace(self.sparsity, kind="topk"))
        return apply_sparsity(a, self.sparsity)

    def decode(self, code) -> np.ndarray:
        code = np.asarray(code, dtype=np.float64)
        if code.shape[-1] != self.n_f:
            raise ShapeError(f"code length {code.shape[-1]} != n_f {self.n_f}")
        return np.tensordot(code, self.atoms(), axes=([-1], [0])) + self.mean

    def reconstruct(self, S) -> np.ndarray:
        return self.decode(self.code(S))

    def firing_coefficient(self, S, i: int) -> float:
        self._check_index(i)
        return float(self.code(S)[i])

    def with_sparsity(self, **kw) -> "Dictionary":
        return replace(self, sparsity=replace(self.sparsity, **kw))

    def renormed(self) -> "Dictionary":
        p = _renorm_numpy(self)
        return replace(self, **p)

    def param_dict(self) -> dict[str, np.ndarray]:
        names = ("dec_key", "dec_value", "dec_flat", "enc_W", "enc_b", "enc_key", "enc_value")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


def _renorm_numpy(d: Dictionary) -> dict[str, np.ndarray]:
    """Unit-norm decoder factors, with dense/bilinear encoders compensating."""
    p = {k: v.copy() for k, v in d.param_dict().items()}
    if d.decoder == "rank1":
        nk = np.linalg.norm(p["dec_key"], axis=-1)
        nv = np.linalg.norm(p["dec_value"], axis=-1)
        p["dec_key"] /= nk[..., None]
        p["dec_value"] /= nv[..., None]
        scale = (nk * nv)[:, 0]
    elif d.decoder == "rank2":
        nk = np.linalg.norm(p["dec_key"], axis=-1)
        nv = np.linalg.norm(p["dec_value"], axis=-1)
        r = np.sqrt(np.maximum(nk, 1e-300) / np.maximum(nv, 1e-300))
        p["dec_key"] /= r[..., None]
        p["dec_value"] *= r[..., None]
        scale = np.linalg.norm(np.einsum("frk,frv->fkv", p["dec_key"], p["dec_value"]), axis=(1, 2))
        p["dec_key"] /= np.sqrt(scale)[:, None, None]
        p["dec_value"] /= np.sqrt(scale)[:, None, None]
    else:
        scale = np.linalg.norm(p["dec_flat"], axis=-1)
        p["dec_flat"] /= scale[:, None]
    if d.encoder == "dense":
        p["enc_W"] *= scale[:, None]
        p["enc_b"] *= scale
    elif d.encoder in ("bilinear", "bilinear_flat"):
        p["enc_key"] *= scale[:, None]
    return p


# ----------------------------------------------------------------------------
# initialisation and checkpoints
# ----------------------------------------------------------------------------


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def init_dictionary(n_f: int, dims: tuple[int, int], variant: str = "rank1",
                    sparsity: SparsityRule | None = None, mean: np.ndarray | None = None,
                    seed: int = 0, theta0: float = 1e-4) -> Dictionary:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    decoder, encoder = VARIANTS[variant]
    dk, dv = dims
    rng = np.random.default_rng(seed)
    sp = sparsity or SparsityRule()
    if sp.kind == "jumprelu" and sp.theta is None:
        sp = replace(sp, theta=np.full(n_f, theta0))
    kw: dict[str, np.ndarray] = {}
    if decoder == "flat":
        kw["dec_flat"] = _unit(rng.normal(size=(n_f, dk * dv)))
        atoms = kw["dec_flat"].reshape(n_f, dk, dv)
    else:
        r = 1 if decoder == "rank1" else 2
        kw["dec_key"] = _unit(rng.normal(size=(n_f, r, dk)))
        kw["dec_value"] = _unit(rng.normal(size=(n_f, r, dv)))
        if r == 2:
            kw["dec_key"] /= np.sqrt(2.0)
            kw["dec_value"] /= np.sqrt(2.0)
        atoms = np.einsum("frk,frv->fkv", kw["dec_key"], kw["dec_value"])
    if encoder == "dense":
        kw["enc_W"] = atoms.reshape(n_f, -1).copy()
        kw["enc_b"] = np.zeros(n_f)
    elif encoder == "bilinear":
        kw["enc_key"] = kw["dec_key"][:, 0].copy()
        kw["enc_value"] = kw["dec_value"][:, 0].copy()
    elif encoder == "bilinear_flat":
        kw["enc_key"] = _unit(rng.normal(size=(n_f, dk)))
        kw["enc_value"] = _unit(rng.normal(size=(n_f, dv)))
    M = np.zeros(dims) if mean is None else np.asarray(mean, dtype=np.float64)
    d = Dictionary(decoder, encoder, sp, M, **kw)
    return d.renormed() if decoder == "rank2" else d


_DC_MAGIC = b"WSDC"
_DC_VERSION = 1
_DC_HEADER = struct.Struct("<4sIIIIIIIII")


def write_dictionary(d: Dictionary, path) -> None:
    """WSDC checkpoint: header then little-endian f64 arrays in a fixed order."""
    dk, dv = d.dims
    rank = {"rank1": 1, "rank2": 2, "flat": 0}[d.decoder]
    head = _DC_HEADER.pack(_DC_MAGIC, _DC_VERSION, DECODERS.index(d.decoder),
                           ENCODERS.index(d.encoder), SPARSITY.index(d.sparsity.kind),
                           d.n_f, dk, dv, rank, d.sparsity.k if d.sparsity.kind != "jumprelu" else 0)
    body = [d.mean]
    body += [d.param_dict()[n] for n in _array_order(d.decoder, d.encoder)]
    if d.sparsity.kind == "jumprelu":
        body.append(np.asarray(d.sparsity.theta))
    Path(path).write_bytes(head + b"".join(np.ascontiguousarray(a, "<f8").tobytes() for a in body))


def _array_order(decoder: str, encoder: str) -> list[str]:
    names = ["dec_flat"] if decoder == "flat" else ["dec_key", "dec_value"]
    names += {"dense": ["enc_W", "enc_b"], "bilinear": ["enc_key", "enc_value"],
              "bilinear_flat": ["enc_key", "enc_value"], "tied": []}[encoder]
    return names


def read_dictionary(path) -> Dictionary:
    data = Path(path).read_bytes()
    if data[:4] != _DC_MAGIC:
        raise MagicError(f"{path}: not a WSDC checkpoint")
    if len(data) < _DC_HEADER.size:
        raise TruncationError(f"{path}: header truncated")
    _, version, dec, enc, sp, n_f, dk, dv, rank, k = _DC_HEADER.unpack_from(data)
    if version != _DC_VERSION:
        raise VersionError(f"{path}: version {version}")
    decoder, encoder, kind = DECODERS[dec], ENCODERS[enc], SPARSITY[sp]
    shapes = {"dec_flat": (n_f, dk * dv), "dec_key": (n_f, rank, dk), "dec_value": (n_f, rank, dv),
              "enc_W": (n_f, dk * dv), "enc_b": (n_f,), "enc_key": (n_f, dk), "enc_value": (n_f, dv)}
    order = [("mean", (dk, dv))] + [(n, shapes[n]) for n in _array_order(decoder, encoder)]
    if kind == "jumprelu":
        order.append(("theta", (n_f,)))
    need = _DC_HEADER.size + 8 * sum(int(np.prod(s)) for _, s in order)
    if len(data) != need:
        raise TruncationError(f"{path}: {len(data)} bytes, expected {need}")
    off, arrays = _DC_HEADER.size, {}
    for name, shape in order:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, "<f8", n, off).reshape(shape).astype(np.float64)
        off += 8 * n
    rule = SparsityRule(kind, k if kind != "jumprelu" else 0, arrays.pop("theta", None))
    mean = arrays.pop("mean")
    return Dictionary(decoder, encoder, rule, mean, **arrays)


# ----------------------------------------------------------------------------
# analytic gradient (rank-1 decoder, dense encoder, TopK support held fixed)
# ----------------------------------------------------------------------------


def reconstruction_loss(d: Dictionary, X: np.ndarray) -> float:
    """Mean squared error over elements for centered states X (B, d_k, d_v)."""
    code = d.code(X + d.mean)
    R = X - (np.tensordot(code, d.atoms(), axes=([-1], [0])))
    return float(np.mean(R * R))


def reconstruction_grads(d: Dictionary, X: np.ndarray) -> dict[str, np.ndarray]:
    """Closed-form gradient of :func:`reconstruction_loss`.

    Valid where the TopK support is locally constant.  Only the rank-1 decoder
    with a dense encoder is covered.
    """
    if d.decoder != "rank1" or d.encoder != "dense":
        raise ConfigError("closed-form gradient covers rank1 + dense only")
    B = len(X)
    D = X.shape[1] * X.shape[2]
    code = d.code(X + d.mean)
    mask = code > 0
    atoms = d.atoms()
    R = X - np.tensordot(code, atoms, axes=([-1], [0]))
    c = -2.0 / (B * D)
    g_code = c * np.einsum("bkv,fkv->bf", R, atoms)
    key, value = d.key, d.value
    g_key = c * np.einsum("bf,bkv,fv->fk", code, R, value)
    g_value = c * np.einsum("bf,bkv,fk->fv", code, R, key)
    g_pre = np.where(mask, g_code, 0.0)
    return {"dec_key": g_key[:, None, :], "dec_value": g_value[:, None, :],
            "enc_W": g_pre.T @ X.reshape(B, -1), "enc_b": g_pre.sum(axis=0)}


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    min_lr: float = 3e-5
    warmup: int = 50
    batch: int = 256
    epochs: int = 20
    lambda_aux: float = 1e-2
    k_aux: int = 256
    renorm_every: int = 100
    resample_every: int = 250
    inactivity: int = 100
    resample: bool = True
    l0_coef: float = 1e-5
    bandwidth: tuple[float, float] = (1e-3, 1e-5)
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "min_lr", "batch", "epochs", "k_aux", "renorm_every",
                     "resample_every", "inactivity"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lambda_aux < 0 or self.warmup < 0:
            raise ConfigError("lambda_aux and warmup must be non-negative")

    def total_steps(self, n_train: int) -> int:
        return self.epochs * math.ceil(n_train / self.batch)


@dataclass
class TrainMetrics:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    dead: list[int] = field(default_factory=list)
    l0: list[float] = field(default_factory=list)
    resampled: int = 0
    steps: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class _JumpStep:
    """Heaviside with a rectangle-kernel straight-through gradient for theta."""

    @staticmethod
    def build():
        import torch

        class Step(torch.autograd.Function):
            @staticmethod
            def forward(ctx, a, theta, bw):
                ctx.save_for_backward(a, theta)
                ctx.bw = bw
                return (a > theta).to(a.dtype)

            @staticmethod
            def backward(ctx, g):
                a, theta = ctx.saved_tensors
                kern = ((a - theta).abs() < ctx.bw / 2).to(a.dtype) / ctx.bw
                return None, -(g * kern).sum(0), None

        class Jump(torch.autograd.Function):
            @staticmethod
            def forward(ctx, a, theta, bw):
                ctx.save_for_backward(a, theta)
                ctx.bw = bw
                return a * (a > theta).to(a.dtype)

            @staticmethod
            def backward(ctx, g):
                a, theta = ctx.saved_tensors
                gate = (a > theta).to(a.dtype)
                kern = ((a - theta).abs() < ctx.bw / 2).to(a.dtype) / ctx.bw
                return g * gate, -(g * theta * kern).sum(0), None

        return Step, Jump


class _TorchSAE:
    def __init__(self, d: Dictionary, train_theta: bool):
        import torch

        self.torch = torch
        self.decoder, self.encoder, self.sparsity = d.decoder, d.encoder, d.sparsity
        self.dims = d.dims
        self.n_f = d.n_f
        self.p = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True)
                  for k, v in d.param_dict().items()}
        if d.sparsity.kind == "jumprelu":
            self.p["log_theta"] = torch.tensor(np.log(d.sparsity.theta), dtype=torch.float64,
                                               requires_grad=train_theta)
        self.Step, self.Jump = _JumpStep.build()

    def atoms(self):
        t = self.torch
        if self.decoder == "flat":
            return self.p["dec_flat"]
        return t.einsum("frk,frv->fkv", self.p["dec_key"], self.p["dec_value"]).reshape(self.n_f, -1)

    def pre(self, x):
        t = self.torch
        X = x.reshape(len(x), *self.dims)
        if self.encoder == "dense":
            return x @ self.p["enc_W"].T + self.p["enc_b"]
        if self.encoder == "tied":
            return t.einsum("fk,bkv,fv->bf", self.p["dec_key"][:, 0], X, self.p["dec_value"][:, 0])
        return t.einsum("fk,bkv,fv->bf", self.p["enc_key"], X, self.p["enc_value"])

    def sparse(self, a, bw):
        t = self.torch
        kind = self.sparsity.kind
        if kind == "jumprelu":
            theta = t.exp(self.p["log_theta"])
            return self.Jump.apply(a, theta, bw), self.Step.apply(a, theta, bw)
        r = t.relu(a)
        if kind == "topk":
            idx = t.topk(r, self.sparsity.k, dim=-1).indices
            mask = t.zeros_like(r).scatter_(-1, idx, 1.0)
        else:
            flat = r.reshape(-1)
            idx = t.topk(flat, self.sparsity.k * len(r)).indices
            mask = t.zeros_like(flat).scatter_(0, idx, 1.0).reshape(r.shape)
        return r * mask, None

    def renorm(self):
        with self.torch.no_grad():
            d = self.to_numpy()
            for k, v in _renorm_numpy(d).items():
                self.p[k].copy_(self.torch.from_numpy(v))

    def to_numpy(self, mean=None) -> Dictionary:
        arr = {k: v.detach().numpy().copy() for k, v in self.p.items() if k != "log_theta"}
        sp = self.sparsity
        if sp.kind == "jumprelu":
            sp = replace(sp, theta=np.exp(self.p["log_theta"].detach().numpy()))
        M = np.zeros(self.dims) if mean is None else mean
        return Dictionary(self.decoder, self.encoder, sp, M, **arr)


def _lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = min(1.0, (step - cfg.warmup) / max(1, total - cfg.warmup))
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def _resample(model: _TorchSAE, opt, dead_idx: np.ndarray, x, recon) -> None:
    """Point still-dead atoms at the worst-reconstructed examples of the batch."""
    t = model.torch
    with t.no_grad():
        err = (x - recon)
        order = t.argsort((err * err).sum(1), descending=True)
        alive = np.setdiff1d(np.arange(model.n_f), dead_idx)
        if model.encoder == "dense":
            enc_norm = model.p["enc_W"].norm(dim=1)
        elif model.encoder in ("bilinear", "bilinear_flat"):
            enc_norm = model.p["enc_key"].norm(dim=1) * model.p["enc_value"].norm(dim=1)
        else:
            enc_norm = t.ones(model.n_f, dtype=t.float64)
        ref = float(enc_norm[alive].mean()) if len(alive) else 1.0
        for j, i in enumerate(dead_idx):
            R = err[order[j % len(order)]].reshape(model.dims).numpy()
            U, s, Vt = np.linalg.svd(R)
            u, v = U[:, 0], Vt[0]
            if model.decoder == "flat":
                model.p["dec_flat"][i] = t.from_numpy(np.outer(u, v).ravel())
            else:
                key = np.zeros(model.p["dec_key"].shape[1:])
                val = np.zeros(model.p["dec_value"].shape[1:])
                key[0], val[0] = u, v
                model.p["dec_key"][i] = t.from_numpy(key)
                model.p["dec_value"][i] = t.from_numpy(val)
            if model.encoder == "dense":
                model.p["enc_W"][i] = t.from_numpy(0.2 * ref * np.outer(u, v).ravel())
                model.p["enc_b"][i] = 0.0
            elif model.encoder in ("bilinear", "bilinear_flat"):
                model.p["enc_key"][i] = t.from_numpy(0.2 * ref * u)
                model.p["enc_value"][i] = t.from_numpy(v)
        for p in model.p.values():
            st = opt.state.get(p)
            if st and p.shape and p.shape[0] == model.n_f:
                st["exp_avg"][dead_idx] = 0.0
                st["exp_avg_sq"][dead_idx] = 0.0


def _flat_states(ds: CaptureDataset, mask) -> np.ndarray:
    return np.ascontiguousarray(ds.states[mask].reshape(int(np.sum(mask)), -1))


def train_sae(dataset: CaptureDataset, n_f: int = 64, variant: str = "rank1",
              sparsity: SparsityRule | None = None, cfg: TrainConfig | None = None,
              init: Dictionary | None = None, log_every: int = 0) -> tuple[Dictionary, TrainMetrics]:
    """Fit a dictionary to the centered states of ``dataset``.

    Loss per step is the element-mean squared error plus ``lambda_aux`` times
    the error of reconstructing the detached residual through the ``k_aux``
    most active dead atoms (JumpReLU adds an L0 penalty instead).
    """
    import torch

    cfg = cfg or TrainConfig()
    if not dataset.centered:
        raise StateError("train_sae expects a centered dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        init = init_dictionary(n_f, dataset.dims, variant, sparsity, seed=cfg.seed)
    init = replace(init, mean=np.array(dataset.mean))
    model = _TorchSAE(init, train_theta=True)
    params = [p for p in model.p.values() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)

    train_mask, val_mask = dataset.train_mask, dataset.val_mask
    Xtr = torch.from_numpy(_flat_states(dataset, train_mask))
    Xva = torch.from_numpy(_flat_states(dataset, val_mask)) if val_mask.any() else Xtr
    n = len(Xtr)
    if n == 0:
        raise ValueError("empty training split")
    total = cfg.total_steps(n)
    since_fired = np.zeros(model.n_f, dtype=np.int64)
    metrics = TrainMetrics()
    step = 0
    bw0, bw1 = cfg.bandwidth

    def evaluate(X) -> tuple[float, int, float, np.ndarray]:
        with torch.no_grad():
            code, _ = model.sparse(model.pre(X), bw0)
            rec = code @ model.atoms()
            fired = (code > 0).any(0).numpy()
            return float(((X - rec) ** 2).mean()), int((~fired).sum()), \
                float((code > 0).sum(1).double().mean()), fired

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            x = Xtr[perm[start:start + cfg.batch]]
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, total, cfg)
            frac = step / max(1, total - 1)
            bw = bw1 + 0.5 * (bw0 - bw1) * (1 + math.cos(math.pi * frac))
            a = model.pre(x)
            code, gate = model.sparse(a, bw)
            atoms = model.atoms()
            recon = code @ atoms
            loss = ((x - recon) ** 2).mean()
            if gate is not None:
                loss = loss + cfg.l0_coef * gate.sum(1).mean()
            fired_now = (code > 0).any(0).detach().numpy()
            since_fired = np.where(fired_now, 0, since_fired + 1)
            dead = since_fired >= cfg.inactivity
            if cfg.lambda_aux > 0 and dead.any():
                resid = (x - recon).detach()
                k_aux = min(cfg.k_aux, int(dead.sum()))
                dead_t = torch.from_numpy(dead)
                a_dead = torch.where(dead_t, torch.relu(a), torch.zeros_like(a))
                idx = torch.topk(a_dead, k_aux, dim=-1).indices
                aux_code = torch.zeros_like(a).scatter(-1, idx, a_dead.gather(-1, idx))
                loss = loss + cfg.lambda_aux * ((resid - aux_code @ atoms) ** 2).mean()
            if not torch.isfinite(loss):
                raise TrainingError("SAE loss diverged", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if step % cfg.renorm_every == 0:
                model.renorm()
            if cfg.resample and step % cfg.resample_every == 0 and dead.any():
                dead_idx = np.flatnonzero(dead)
                _resample(model, opt, dead_idx, x.detach(), recon.detach())
                since_fired[dead_idx] = 0
                metrics.resampled += len(dead_idx)
            if log_every and step % log_every == 0:
                print(f"sae step {step}: loss {loss.item():.3e}")
        tr_mse, _, _, _ = evaluate(Xtr)
        va_mse, n_dead, l0, _ = evaluate(Xva)
        metrics.train_mse.append(tr_mse)
        metrics.val_mse.append(va_mse)
        metrics.dead.append(n_dead)
        metrics.l0.append(l0)
    model.renorm()
    metrics.steps = step
    return model.to_numpy(np.array(dataset.mean)), metrics


def val_mse(d: Dictionary, dataset: CaptureDataset, mask=None) -> float:
    """Element-mean squared error of the centered reconstruction."""
    mask = dataset.val_mask if mask is None else mask
    S = dataset.states[mask] + (dataset.mean if dataset.centered else 0.0)
    return float(np.mean((d.reconstruct(S) - S) ** 2))


def alive_features(d: Dictionary, dataset: CaptureDataset, min_firings: int = 10,
                   mask=None) -> np.ndarray:
    """Boolean per atom: fires on at least ``min_firings`` positions of the split."""
    mask = dataset.val_mask if mask is None else mask
    S = dataset.states[mask] + (dataset.mean if dataset.centered else 0.0)
    return (d.code(S) > 0).sum(axis=0) >= min_firings
