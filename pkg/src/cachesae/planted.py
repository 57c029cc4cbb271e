"""Synthetic datasets with a known rank-1 dictionary, for recovery checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capture import CaptureDataset


@dataclass(frozen=True)
class PlantedData:
    dataset: CaptureDataset
    keys: np.ndarray       # (n_atoms, d_k) unit
    values: np.ndarray     # (n_atoms, d_v) unit
    support: np.ndarray    # (N, k) planted atom indices per sample
    coefs: np.ndarray      # (N, k)


def planted_dataset(n_atoms: int = 32, d: int = 16, k: int = 4, n_samples: int = 5000,
                    seed: int = 0, coef_range: tuple[float, float] = (0.5, 1.5),
                    seq_len: int = 50) -> PlantedData:
    """States that are nonnegative sums of ``k`` out of ``n_atoms`` unit rank-1 atoms.

    Samples are grouped into pseudo-sequences of ``seq_len`` so the usual
    by-sequence split applies.  The write fields describe the largest
    component of each sample (beta = its coefficient).
    """
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(n_atoms, d))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    values = rng.normal(size=(n_atoms, d))
    values /= np.linalg.norm(values, axis=1, keepdims=True)
    support = np.argsort(rng.random((n_samples, n_atoms)), axis=1)[:, :k]
    coefs = rng.uniform(*coef_range, size=(n_samples, k))
    states = np.einsum("nj,njk,njv->nkv", coefs, keys[support], values[support])
    top = support[np.arange(n_samples), np.argmax(coefs, axis=1)]
    beta = np.clip(coefs.max(axis=1) / coef_range[1], 0.0, 1.0)
    ds = CaptureDataset(
        (0, 0), states, np.arange(n_samples) // seq_len, np.arange(n_samples) % seq_len,
        keys[top], values[top] * (coefs.max(axis=1) / beta)[:, None], keys[top],
        np.ones(n_samples), beta, np.zeros((d, d)), False, seed & 0xFFFFFF)
    return PlantedData(ds, keys, values, support, coefs)


def match_planted(dict_key: np.ndarray, dict_value: np.ndarray, keys: np.ndarray,
                  values: np.ndarray, threshold: float = 0.9) -> np.ndarray:
    """Per planted atom: True if some learned atom has both factor |cos| > threshold."""
    ck = np.abs(keys @ dict_key.T)
    cv = np.abs(values @ dict_value.T)
    return ((ck > threshold) & (cv > threshold)).any(axis=1)
