from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cachesae.capture import (capture_states, center, decenter, read_capture_file,
                              split_sequences, write_capture_file)
from cachesae.corpus import Grammar
from cachesae.errors import MagicError, StateError, TruncationError, VersionError
from cachesae.hosts import forward


@pytest.fixture(scope="module")
def captured(tiny_host):
    corpus = np.random.default_rng(0).integers(0, 11, size=(12, 9))
    return capture_states(tiny_host, corpus, (1, 0), split_seed=77, seq_offset=100), corpus


def test_capture_matches_forward(captured, tiny_host):
    ds, corpus = captured
    assert len(ds) == 12 * 9
    i = ds.index_of(103, 4)
    tr = forward(tiny_host, corpus[3])
    np.testing.assert_allclose(ds.states[i], tr.states[4, 1, 0], atol=1e-12)
    np.testing.assert_allclose(ds.native_writes([i])[0], tr.native_write(4, 1, 0), atol=1e-12)
    e = ds.event(i)
    assert (e.seq_id, e.position) == (103, 4)


def test_roundtrip_is_byte_exact(captured, tmp_path):
    ds, _ = captured
    p = tmp_path / "c.wsae"
    write_capture_file(ds, p)
    back = read_capture_file(p, ds.cell)
    assert back.to_bytes() == ds.to_bytes()
    assert back.split_seed == 77
    c = center(ds)
    write_capture_file(c, p)
    back = read_capture_file(p, ds.cell)
    assert back.centered and back.sha256() == c.sha256()


def test_header_layout(captured):
    ds, _ = captured
    raw = ds.to_bytes()
    magic, version, dk, dv, flags, n = struct.unpack_from("<4sIIIIQ", raw)
    assert (magic, version, dk, dv, n) == (b"WSAE", 1, 6, 5, len(ds))
    assert flags >> 8 == 77 and flags & 1 == 0
    record = 8 + 4 + 8 * (6 * 5 + 6 + 5 + 6 + 2)
    assert len(raw) == struct.calcsize("<4sIIIIQ") + 8 * 30 + n * record


def test_format_errors(captured, tmp_path):
    ds, _ = captured
    raw = ds.to_bytes()
    p = tmp_path / "bad.wsae"
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(MagicError):
        read_capture_file(p)
    p.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(VersionError):
        read_capture_file(p)
    p.write_bytes(raw[:-3])
    with pytest.raises(TruncationError):
        read_capture_file(p)
    p.write_bytes(raw[:10])
    with pytest.raises(TruncationError):
        read_capture_file(p)


def test_center_uses_train_mean(captured):
    ds, _ = captured
    c = center(ds)
    np.testing.assert_allclose(c.states[c.train_mask].mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(c.raw_states(), ds.states, atol=1e-12)
    np.testing.assert_allclose(decenter(c).states, ds.states, atol=1e-12)
    with pytest.raises(StateError):
        center(c)
    with pytest.raises(StateError):
        decenter(ds)


def test_split_is_by_sequence(captured):
    ds, _ = captured
    tr = ds.train_mask
    for sid in np.unique(ds.seq_ids):
        rows = ds.seq_ids == sid
        assert tr[rows].all() or (~tr[rows]).all()
    assert tr.sum() == 10 * 9


@given(st.integers(2, 200), st.integers(0, 2**24 - 1))
def test_split_sequences_properties(n, seed):
    ids = np.arange(n)
    a = split_sequences(ids, seed)
    assert np.array_equal(a, split_sequences(ids, seed))
    assert len(a) == max(1, round(0.8 * n))
    assert len(np.unique(a)) == len(a)


def test_capture_rejects_bad_cell(tiny_host):
    with pytest.raises(ValueError):
        capture_states(tiny_host, [[1, 2]], (2, 0))


def test_grammar_recall_and_boundaries():
    g = Grammar(seed=1)
    data = g.sample(200, 64, seed=2)
    assert data.shape == (200, 64) and data.min() >= 0 and data.max() < 64
    trig, targ = g.triggers, g.targets
    hits = total = 0
    for seq in data:
        for t in range(len(seq) - g.gap):
            if seq[t] in trig:
                total += 1
                hits += seq[t + g.gap] == targ[list(trig).index(seq[t])]
    assert total > 100 and hits / total > 0.7
    assert np.mean(data == 0) > 0.05
    assert np.array_equal(data, g.sample(200, 64, seed=2))
