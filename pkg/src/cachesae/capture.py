"""Per-token cache snapshots for one (layer, head) cell, and the WSAE file format.

File layout (all little-endian)::

    magic  b"WSAE"
    u32    version (=1)
    u32    d_k
    u32    d_v
    u32    flags    bit 0 = centered, bits 8..31 = train/val split seed
    u64    N
    f64    M[d_k * d_v]            row-major mean state
    N records of
        u64 seq_id, u32 position,
        f64 state[d_k * d_v], f64 k[d_k], f64 v[d_v], f64 q[d_k],
        f64 alpha, f64 beta

States are stored after the token's own write.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import MagicError, ShapeError, StateError, TruncationError, VersionError
from .hosts import HostModel, WriteEvent, forward

MAGIC = b"WSAE"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")
_MAX_SPLIT_SEED = (1 << 24) - 1


def split_sequences(seq_ids, seed: int, train_fraction: float = 0.8) -> np.ndarray:
    """Train set of sequence ids: a seeded 80/20 split over whole sequences."""
    uniq = np.unique(np.asarray(seq_ids))
    perm = np.random.default_rng(seed).permutation(len(uniq))
    n_train = max(1, int(round(train_fraction * len(uniq)))) if len(uniq) > 1 else len(uniq)
    return np.sort(uniq[perm[:n_train]])


@dataclass(frozen=True)
class CaptureDataset:
    """N post-write state snapshots plus their write tuples for one cell."""

    cell: tuple[int, int]
    states: np.ndarray      # (N, d_k, d_v)
    seq_ids: np.ndarray     # (N,)
    positions: np.ndarray   # (N,)
    keys: np.ndarray        # (N, d_k)
    values: np.ndarray      # (N, d_v)
    queries: np.ndarray     # (N, d_k)
    alpha: np.ndarray       # (N,)
    beta: np.ndarray        # (N,)
    mean: np.ndarray        # (d_k, d_v)
    centered: bool = False
    split_seed: int = 0

    def __post_init__(self):
        N = len(self.seq_ids)
        if self.states.ndim != 3 or self.states.shape[0] != N:
            raise ShapeError("states must be (N, d_k, d_v)")
        dk, dv = self.states.shape[1:]
        checks = {"positions": (N,), "keys": (N, dk), "values": (N, dv), "queries": (N, dk),
                  "alpha": (N,), "beta": (N,)}
        for name, shape in checks.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {getattr(self, name).shape}")
        if self.mean.shape != (dk, dv):
            raise ShapeError("mean must be (d_k, d_v)")
        if not 0 <= self.split_seed <= _MAX_SPLIT_SEED:
            raise ValueError("split_seed must fit in 24 bits")
        for name in ("states", "seq_ids", "positions", "keys", "values", "queries", "alpha",
                     "beta", "mean"):
            getattr(self, name).setflags(write=False)

    def __len__(self) -> int:
        return len(self.seq_ids)

    @property
    def dims(self) -> tuple[int, int]:
        return self.states.shape[1], self.states.shape[2]

    @property
    def train_mask(self) -> np.ndarray:
        return np.isin(self.seq_ids, split_sequences(self.seq_ids, self.split_seed))

    @property
    def val_mask(self) -> np.ndarray:
        return ~self.train_mask

    def native_writes(self, idx=None) -> np.ndarray:
        sl = slice(None) if idx is None else idx
        return self.beta[sl, None, None] * self.keys[sl, :, None] * self.values[sl, None, :]

    def raw_states(self) -> np.ndarray:
        """States with the mean added back (identity when not centered)."""
        return self.states + self.mean if self.centered else self.states.copy()

    def event(self, i: int) -> WriteEvent:
        return WriteEvent(self.keys[i], self.values[i], self.queries[i], float(self.alpha[i]),
                          float(self.beta[i]), int(self.seq_ids[i]), int(self.positions[i]))

    def index_of(self, seq_id: int, position: int) -> int:
        hits = np.flatnonzero((self.seq_ids == seq_id) & (self.positions == position))
        if len(hits) == 0:
            raise KeyError((seq_id, position))
        return int(hits[0])

    def subset(self, mask) -> "CaptureDataset":
        mask = np.asarray(mask)
        return replace(self, states=self.states[mask], seq_ids=self.seq_ids[mask],
                       positions=self.positions[mask], keys=self.keys[mask],
                       values=self.values[mask], queries=self.queries[mask],
                       alpha=self.alpha[mask], beta=self.beta[mask])

    def to_bytes(self) -> bytes:
        dk, dv = self.dims
        flags = int(self.centered) | (self.split_seed << 8)
        head = _HEADER.pack(MAGIC, VERSION, dk, dv, flags, len(self))
        rec = np.empty(len(self), dtype=_record_dtype(dk, dv))
        rec["seq_id"], rec["position"] = self.seq_ids, self.positions
        rec["state"] = self.states.reshape(len(self), -1)
        rec["k"], rec["v"], rec["q"] = self.keys, self.values, self.queries
        rec["alpha"], rec["beta"] = self.alpha, self.beta
        return head + np.ascontiguousarray(self.mean, dtype="<f8").tobytes() + rec.tobytes()

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _record_dtype(dk: int, dv: int) -> np.dtype:
    return np.dtype([("seq_id", "<u8"), ("position", "<u4"), ("state", "<f8", (dk * dv,)),
                     ("k", "<f8", (dk,)), ("v", "<f8", (dv,)), ("q", "<f8", (dk,)),
                     ("alpha", "<f8"), ("beta", "<f8")])


def capture_states(model: HostModel, corpus, cell: tuple[int, int], split_seed: int = 0,
                   seq_offset: int = 0) -> CaptureDataset:
    """Run ``model`` over each sequence and keep every post-write state of ``cell``.

    Records are ordered sequence-major, position-minor; ``seq_id`` is the row
    index in ``corpus`` plus ``seq_offset``.
    """
    cfg = model.config
    layer, head = cell
    if not (0 <= layer < cfg.n_layers and 0 <= head < cfg.n_heads):
        raise ValueError(f"cell {cell} outside a {cfg.n_layers}x{cfg.n_heads} host")
    seqs = [np.asarray(s) for s in corpus]
    if len(seqs) == 0 or any(len(s) == 0 for s in seqs):
        raise ValueError("corpus is empty")
    parts: dict[str, list[np.ndarray]] = {n: [] for n in
                                          ("S", "sid", "pos", "k", "v", "q", "a", "b")}
    for i, seq in enumerate(seqs):
        tr = forward(model, seq)
        L = len(seq)
        parts["S"].append(tr.states[:, layer, head])
        parts["sid"].append(np.full(L, i + seq_offset, dtype=np.int64))
        parts["pos"].append(np.arange(L, dtype=np.int64))
        parts["k"].append(tr.keys[:, layer, head])
        parts["v"].append(tr.values[:, layer, head])
        parts["q"].append(tr.queries[:, layer, head])
        parts["a"].append(tr.alpha[:, layer, head])
        parts["b"].append(tr.beta[:, layer, head])
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    return CaptureDataset((layer, head), cat["S"], cat["sid"], cat["pos"], cat["k"], cat["v"],
                          cat["q"], cat["a"], cat["b"], np.zeros(cfg.state_shape), False,
                          split_seed)


def center(dataset: CaptureDataset) -> CaptureDataset:
    """Subtract the train-split mean state from every snapshot."""
    if dataset.centered:
        raise StateError("dataset is already centered")
    M = dataset.states[dataset.train_mask].mean(axis=0)
    return replace(dataset, states=dataset.states - M, mean=M, centered=True)


def decenter(dataset: CaptureDataset) -> CaptureDataset:
    if not dataset.centered:
        raise StateError("dataset is not centered")
    return replace(dataset, states=dataset.states + dataset.mean,
                   mean=np.zeros_like(dataset.mean), centered=False)


def write_capture_file(dataset: CaptureDataset, path) -> None:
    Path(path).write_bytes(dataset.to_bytes())


def read_capture_file(path, cell: tuple[int, int] = (0, 0)) -> CaptureDataset:
    """Parse a WSAE file.  The format does not record the cell; pass it in."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicError(f"{path}: not a WSAE file")
    if len(data) < _HEADER.size:
        raise TruncationError(f"{path}: header truncated")
    _, version, dk, dv, flags, N = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"{path}: version {version}, expected {VERSION}")
    rdt = _record_dtype(dk, dv)
    expected = _HEADER.size + 8 * dk * dv + N * rdt.itemsize
    if len(data) != expected:
        raise TruncationError(f"{path}: {len(data)} bytes, expected {expected}")
    off = _HEADER.size
    M = np.frombuffer(data, "<f8", dk * dv, off).reshape(dk, dv).astype(np.float64)
    rec = np.frombuffer(data, rdt, N, off + 8 * dk * dv)
    return CaptureDataset(
        tuple(cell), rec["state"].reshape(N, dk, dv).astype(np.float64),
        rec["seq_id"].astype(np.int64), rec["position"].astype(np.int64),
        rec["k"].astype(np.float64), rec["v"].astype(np.float64), rec["q"].astype(np.float64),
        rec["alpha"].astype(np.float64), rec["beta"].astype(np.float64), M,
        bool(flags & 1), flags >> 8)
