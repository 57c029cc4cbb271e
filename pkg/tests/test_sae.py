from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cachesae.capture import CaptureDataset, center
from cachesae.errors import ConfigError, MagicError, ShapeError, TruncationError
from cachesae.sae import (VARIANTS, SparsityRule, TrainConfig, apply_sparsity, init_dictionary,
                          read_dictionary, reconstruction_grads, reconstruction_loss,
                          train_sae, val_mse, write_dictionary)


def _copies_dataset(M: np.ndarray, n: int = 400) -> CaptureDataset:
    dk, dv = M.shape
    states = np.repeat(M[None], n, axis=0)
    k = np.tile(M[:, 0] / np.linalg.norm(M[:, 0]), (n, 1))
    return CaptureDataset((0, 0), states, np.arange(n) // 20, np.arange(n) % 20, k,
                          np.zeros((n, dv)), k, np.ones(n), np.zeros(n), np.zeros((dk, dv)),
                          False, 5)


def test_topk_examples():
    rule = SparsityRule("topk", 2)
    np.testing.assert_array_equal(apply_sparsity(np.array([3.0, 1.0, 2.0]), rule), [3, 0, 2])
    assert not apply_sparsity(-np.ones(5), rule).any()
    # lower index wins an exact tie
    np.testing.assert_array_equal(apply_sparsity(np.array([1.0, 2.0, 2.0, 2.0]), rule), [0, 2, 2, 0])
    with pytest.raises(ConfigError):
        apply_sparsity(np.ones(3), SparsityRule("topk", 4))


@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9))
def test_batchtopk_keeps_batch_k_largest(vals):
    a = np.array(vals).reshape(3, 3)
    code = apply_sparsity(a[:2], SparsityRule("batchtopk", 1))
    pos = np.sort(np.maximum(a[:2].ravel(), 0))[::-1][:2]
    assert np.count_nonzero(code) == np.count_nonzero(pos)
    np.testing.assert_array_equal(np.sort(code.ravel())[::-1][:2], pos)
    assert np.all(code >= 0)


def test_jumprelu_threshold():
    rule = SparsityRule("jumprelu", 0, np.array([0.5, 0.5, -1.0]))
    np.testing.assert_array_equal(apply_sparsity(np.array([0.6, 0.4, -0.5]), rule), [0.6, 0, -0.5])


def test_encode_matched_filter_algebra(rng):
    d = init_dictionary(5, (6, 4), "tied", SparsityRule("topk", 5), seed=1)
    c = 1.7
    S = c * np.outer(d.key[0], d.value[0])
    a = d.encode(S)
    assert a[0] == pytest.approx(c)
    want = c * (d.key[0] @ d.key.T) * (d.value[0] @ d.value.T)
    np.testing.assert_allclose(a, want, atol=1e-12)


def test_encode_dense_matches_loop(rng):
    d = init_dictionary(4, (8, 8), "rank1", SparsityRule("topk", 2), mean=rng.normal(size=(8, 8)))
    d = replace(d, enc_W=rng.normal(size=(4, 64)), enc_b=rng.normal(size=4))
    S = rng.normal(size=(8, 8))
    want = [sum(d.enc_W[f, i * 8 + j] * (S - d.mean)[i, j] for i in range(8) for j in range(8))
            + d.enc_b[f] for f in range(4)]
    np.testing.assert_allclose(d.encode(S), want, atol=1e-12)


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_decode_matches_accumulation(variant, rng):
    d = init_dictionary(6, (5, 4), variant, SparsityRule("topk", 2), mean=rng.normal(size=(5, 4)), seed=2)
    np.testing.assert_array_equal(d.decode(np.zeros(6)), d.mean)
    code = rng.uniform(size=6)
    want = d.mean.copy()
    for i in range(6):
        want = want + code[i] * d.atom(i)
    np.testing.assert_allclose(d.decode(code), want, atol=1e-12)
    one = d.decode(2.5 * np.eye(6)[0]) - d.mean
    assert np.linalg.norm(one) == pytest.approx(2.5)
    with pytest.raises(ShapeError):
        d.decode(np.zeros(5))


def test_firing_coefficient_full_k(rng):
    d = init_dictionary(4, (3, 3), "rank1", SparsityRule("topk", 4))
    d = replace(d, enc_b=np.full(4, 100.0))
    S = rng.normal(size=(3, 3))
    np.testing.assert_allclose([d.firing_coefficient(S, i) for i in range(4)], d.encode(S))
    with pytest.raises(IndexError):
        d.firing_coefficient(S, 4)


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_renorm_idempotent_and_preserves_reconstruction(variant, rng):
    d = init_dictionary(6, (5, 4), variant, SparsityRule("topk", 3), seed=3)
    p = {k: v * rng.uniform(0.5, 2.0, size=(v.shape[0],) + (1,) * (v.ndim - 1))
         for k, v in d.param_dict().items() if k.startswith("dec")}
    d = replace(d, **p)
    r1 = d.renormed()
    r2 = r1.renormed()
    for k, v in r1.param_dict().items():
        np.testing.assert_allclose(r2.param_dict()[k], v, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(r1.atoms(), axis=(1, 2)), 1.0, atol=1e-12)
    if d.encoder == "dense":
        # with the full support kept, each atom's contribution a_i * A_i is scale-free
        S = rng.normal(size=(10, 5, 4))
        full, rfull = d.with_sparsity(k=6), r1.with_sparsity(k=6)
        np.testing.assert_allclose(rfull.reconstruct(S), full.reconstruct(S), atol=1e-10)


@pytest.mark.parametrize("variant", sorted(VARIANTS))
@pytest.mark.parametrize("kind", ["topk", "jumprelu"])
def test_checkpoint_roundtrip(variant, kind, tmp_path, rng):
    d = init_dictionary(5, (4, 3), variant, SparsityRule(kind, 2), mean=rng.normal(size=(4, 3)), seed=4)
    p = tmp_path / "d.wsdc"
    write_dictionary(d, p)
    back = read_dictionary(p)
    assert (back.decoder, back.encoder, back.sparsity.kind) == (d.decoder, d.encoder, kind)
    if kind == "jumprelu":
        np.testing.assert_array_equal(back.sparsity.theta, d.sparsity.theta)
    else:
        assert back.sparsity.k == d.sparsity.k
    for k, v in d.param_dict().items():
        np.testing.assert_array_equal(back.param_dict()[k], v)
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(TruncationError):
        read_dictionary(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MagicError):
        read_dictionary(p)


def _numeric_grads(d, X, h=1e-6):
    out = {}
    for name in ("dec_key", "dec_value"):
        base = d.param_dict()[name]
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            hi, lo = base.copy(), base.copy()
            hi[idx] += h
            lo[idx] -= h
            g[idx] = (reconstruction_loss(replace(d, **{name: hi}), X)
                      - reconstruction_loss(replace(d, **{name: lo}), X)) / (2 * h)
        out[name] = g
    return out


def gradient_check_instance(seed: int) -> float:
    """Max relative error of the decoder-factor gradient on a random 8x8 problem."""
    rng = np.random.default_rng(seed)
    d = init_dictionary(6, (8, 8), "rank1", SparsityRule("topk", 3), seed=seed)
    d = replace(d, enc_W=rng.normal(size=(6, 64)), enc_b=rng.normal(size=6),
                dec_key=rng.normal(size=(6, 1, 8)), dec_value=rng.normal(size=(6, 1, 8)))
    X = rng.normal(size=(5, 8, 8))
    an = reconstruction_grads(d, X)
    num = _numeric_grads(d, X)
    err = 0.0
    for name, g in num.items():
        err = max(err, np.linalg.norm(an[name] - g) / max(np.linalg.norm(g), 1e-30))
    return err


def test_gradient_check_few_instances():
    assert max(gradient_check_instance(s) for s in range(5)) <= 1e-5


def test_larger_k_never_worsens(rng):
    d = init_dictionary(16, (4, 4), "rank1", SparsityRule("topk", 2), seed=5)
    S = rng.normal(size=(50, 4, 4))
    errs = [np.mean((d.with_sparsity(k=k).reconstruct(S) - S) ** 2) for k in (1, 2, 4, 8)]
    # the initial dense encoder equals the atoms, so adding atoms is a greedy descent step
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_single_rank1_recovery():
    rng = np.random.default_rng(0)
    k, v = rng.normal(size=6), rng.normal(size=5)
    k /= np.linalg.norm(k)
    v /= np.linalg.norm(v)
    ds = _copies_dataset(1.3 * np.outer(k, v))
    # copies of one matrix have zero variance about the mean, so train on the raw states
    ds = replace(ds, centered=True)
    cfg = TrainConfig(lr=1e-2, min_lr=1e-3, warmup=5, batch=64, epochs=30, k_aux=2,
                      renorm_every=10, resample_every=50, inactivity=20, seed=0)
    d, m = train_sae(ds, 4, "rank1", SparsityRule("topk", 1), cfg)
    assert m.val_mse[-1] <= 1e-8
    assert np.max(np.abs(d.key @ k)) > 0.999 and np.max(np.abs(d.value @ v)) > 0.999


def test_dead_count_never_decreases_without_revival(rng):
    X = rng.normal(size=(300, 4, 4))
    ds = center(CaptureDataset((0, 0), X, np.arange(300) // 10, np.arange(300) % 10,
                               np.ones((300, 4)) / 2, np.zeros((300, 4)), np.ones((300, 4)) / 2,
                               np.ones(300), np.zeros(300), np.zeros((4, 4)), False, 1))
    init = init_dictionary(8, (4, 4), "rank1", SparsityRule("topk", 2))
    # atoms 4..7 can never be selected
    init = replace(init, enc_b=np.where(np.arange(8) >= 4, -1e6, 0.0))
    cfg = TrainConfig(lr=1e-3, batch=50, epochs=6, lambda_aux=0.0, resample=False)
    _, m = train_sae(ds, 8, "rank1", SparsityRule("topk", 2), cfg, init=init)
    assert all(b >= a for a, b in zip(m.dead, m.dead[1:])) and m.dead[0] >= 4


def test_training_is_deterministic(rng):
    X = rng.normal(size=(200, 3, 3))
    ds = center(CaptureDataset((0, 0), X, np.arange(200) // 10, np.arange(200) % 10,
                               np.ones((200, 3)), np.zeros((200, 3)), np.ones((200, 3)),
                               np.ones(200), np.zeros(200), np.zeros((3, 3)), False, 2))
    cfg = TrainConfig(batch=40, epochs=2, seed=3)
    a, _ = train_sae(ds, 6, "rank1", SparsityRule("topk", 2), cfg)
    b, _ = train_sae(ds, 6, "rank1", SparsityRule("topk", 2), cfg)
    np.testing.assert_array_equal(a.dec_key, b.dec_key)
    assert val_mse(a, ds) == val_mse(b, ds)
