from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cachesae.corpus import entropy_rate, markov_corpus, two_class_chain
from cachesae.errors import NumericError, ShapeError, TokenError
from cachesae.hosts import (CachePatch, HostConfig, HostModel, WriteEvent, add_to_state,
                            diag_ssm_step, forward, gdn_step, generate_greedy, init_host,
                            linear_readout_host, replace_write, torch_logits, train_toy_host)


def naive_gdn(S, k, v, q, alpha, beta):
    dk, dv = S.shape
    out = np.zeros_like(S)
    for i in range(dk):
        for j in range(dv):
            kS = sum(k[m] * S[m, j] for m in range(dk))
            out[i, j] = alpha * (S[i, j] - beta * k[i] * kS) + beta * k[i] * v[j]
    o = np.array([sum(out[i, j] * q[i] for i in range(dk)) for j in range(dv)])
    return out, o


def _event(rng, dk=5, dv=4, alpha=None, beta=None):
    k = rng.normal(size=dk)
    q = rng.normal(size=dk)
    return WriteEvent(k / np.linalg.norm(k), rng.normal(size=dv), q / np.linalg.norm(q),
                      float(rng.uniform(0.2, 1.0) if alpha is None else alpha),
                      float(rng.uniform(0, 1) if beta is None else beta))


def test_gdn_step_matches_double_loop(rng):
    for _ in range(50):
        e = _event(rng)
        S = rng.normal(size=(5, 4))
        got, o = gdn_step(S, e)
        want, o_want = naive_gdn(S, e.k, e.v, e.q, e.alpha, e.beta)
        np.testing.assert_allclose(got, want, atol=1e-12)
        np.testing.assert_allclose(o, o_want, atol=1e-12)


def test_ungated_variant_ignores_alpha(rng):
    e = _event(rng, alpha=0.3)
    S = rng.normal(size=(5, 4))
    e1 = WriteEvent(e.k, e.v, e.q, 1.0, e.beta)
    np.testing.assert_array_equal(gdn_step(S, e, gated=False)[0], gdn_step(S, e1)[0])


@given(st.integers(0, 2**31 - 1))
def test_full_strength_write_stores_value_at_key(seed):
    # beta = 1 with a unit key: the key row of the new state is exactly v
    rng = np.random.default_rng(seed)
    e = _event(rng, beta=1.0)
    S = rng.normal(size=(5, 4))
    S1, _ = gdn_step(S, e)
    np.testing.assert_allclose(e.k @ S1, e.v, atol=1e-10)


@given(st.integers(0, 2**31 - 1))
def test_closed_gate_write_is_pure_decay(seed):
    rng = np.random.default_rng(seed)
    e = _event(rng, beta=0.0)
    S = rng.normal(size=(5, 4))
    np.testing.assert_allclose(gdn_step(S, e)[0], e.alpha * S, atol=1e-14)


def test_step_errors(rng):
    e = _event(rng)
    with pytest.raises(ShapeError):
        gdn_step(np.zeros((4, 4)), e)
    with pytest.raises(NumericError):
        gdn_step(np.full((5, 4), np.nan), e)
    with pytest.raises(NumericError):
        WriteEvent(e.k, e.v, e.q, 1.5, 0.5)
    with pytest.raises(NumericError):
        WriteEvent(e.k, e.v, e.q, 0.5, -0.1)


def test_diag_ssm_step():
    s = np.array([1.0, -2.0])
    out = diag_ssm_step(s, np.array([0.5, 1.0]), 2.0, 0.1, np.array([0.9, 0.5]))
    np.testing.assert_allclose(out, [0.9 + 0.1, -1.0 + 0.2])
    with pytest.raises(NumericError):
        diag_ssm_step(s, s, 1.0, 0.1, np.array([0.0, 0.5]))
    with pytest.raises(ShapeError):
        diag_ssm_step(s, np.ones(3), 1.0, 0.1, np.ones(2))


def test_forward_states_follow_gdn_chain(tiny_host, rng):
    toks = rng.integers(0, 11, size=20)
    tr = forward(tiny_host, toks)
    for layer in range(2):
        for head in range(2):
            S = np.zeros(tiny_host.config.state_shape)
            for t in range(len(toks)):
                S, o = gdn_step(S, tr.event(t, layer, head))
                np.testing.assert_allclose(tr.states[t, layer, head], S, atol=1e-12)
                np.testing.assert_allclose(tr.outputs[t, layer, head], o, atol=1e-12)


def test_ssm_forward_states_follow_diag_chain(tiny_ssm, rng):
    toks = rng.integers(0, 11, size=15)
    tr = forward(tiny_ssm, toks)
    assert tiny_ssm.config.state_shape == (6, 1)
    for layer in range(2):
        for head in range(2):
            s = np.zeros(6)
            for t in range(len(toks)):
                e = tr.event(t, layer, head)
                s = diag_ssm_step(s, e.k, float(e.v[0]), 1.0, tr.decay[t, layer, head])
                np.testing.assert_allclose(tr.states[t, layer, head, :, 0], s, atol=1e-12)
                # alpha is the geometric mean of the per-coordinate decay
                assert np.isclose(e.alpha, np.exp(np.mean(np.log(tr.decay[t, layer, head]))))


@pytest.mark.parametrize("fixture", ["tiny_host", "tiny_ssm"])
def test_numpy_forward_matches_torch_mirror(fixture, request, rng):
    model = request.getfixturevalue(fixture)
    toks = rng.integers(0, 11, size=(3, 17))
    want = torch_logits(model, toks)
    for b in range(3):
        np.testing.assert_allclose(forward(model, toks[b]).logits, want[b], atol=1e-10)


def test_resume_is_bit_exact(tiny_host, rng):
    toks = rng.integers(0, 11, size=25)
    base = forward(tiny_host, toks)
    for t0 in (0, 1, 12, 24):
        r = forward(tiny_host, toks, resume=(base, t0))
        np.testing.assert_array_equal(r.logits, base.logits)
        np.testing.assert_array_equal(r.states, base.states)
        z = forward(tiny_host, toks, [add_to_state(t0, 1, 0, np.zeros((6, 5)))], resume=(base, t0))
        np.testing.assert_array_equal(z.logits, base.logits)


def test_resume_never_mutates_base(tiny_host, rng):
    toks = rng.integers(0, 11, size=10)
    base = forward(tiny_host, toks)
    before = base.states.copy()
    forward(tiny_host, toks, [add_to_state(3, 0, 1, np.ones((6, 5)))], resume=(base, 3))
    np.testing.assert_array_equal(base.states, before)
    with pytest.raises(ValueError):
        forward(tiny_host, toks, [add_to_state(2, 0, 0, np.ones((6, 5)))], resume=(base, 3))
    with pytest.raises(TokenError):
        forward(tiny_host, toks[::-1], resume=(base, 3))


def test_replace_write_with_native_is_identity(tiny_host, rng):
    toks = rng.integers(0, 11, size=12)
    base = forward(tiny_host, toks)
    native = base.native_write(5, 0, 1)
    r = forward(tiny_host, toks, [replace_write(5, 0, 1, native)], resume=(base, 5))
    np.testing.assert_allclose(r.logits, base.logits, atol=1e-13)


def test_patch_changes_only_later_positions(tiny_host, rng):
    toks = rng.integers(0, 11, size=12)
    base = forward(tiny_host, toks)
    r = forward(tiny_host, toks, [add_to_state(6, 0, 0, np.ones((6, 5)))])
    np.testing.assert_array_equal(r.logits[:6], base.logits[:6])
    assert np.abs(r.logits[6:] - base.logits[6:]).max() > 1e-6


def test_tokens_out_of_range(tiny_host):
    with pytest.raises(TokenError):
        forward(tiny_host, [0, 11])
    with pytest.raises(TokenError):
        forward(tiny_host, [-1])


def test_greedy_matches_forward(tiny_host, rng):
    prompt = rng.integers(0, 11, size=7)
    toks, logits = generate_greedy(tiny_host, prompt, 6, return_logits=True)
    full = np.concatenate([prompt, toks])
    tr = forward(tiny_host, full)
    np.testing.assert_allclose(logits, tr.logits[len(prompt) - 1:len(full) - 1], atol=1e-12)
    assert np.array_equal(toks, np.argmax(logits, axis=1))


def test_greedy_edit_hook_matches_forward_patch(tiny_host, rng):
    prompt = rng.integers(0, 11, size=6)
    delta = rng.normal(size=(6, 5))

    def hook(pos):
        return [add_to_state(pos, 1, 1, delta)] if pos == 5 else []

    toks, logits = generate_greedy(tiny_host, prompt, 3, edit=hook, return_logits=True)
    tr = forward(tiny_host, prompt, [add_to_state(5, 1, 1, delta)])
    np.testing.assert_allclose(logits[0], tr.logits[-1], atol=1e-12)


def test_save_load_roundtrip(tiny_host, tmp_path, rng):
    p = tmp_path / "h.npz"
    tiny_host.save(p)
    back = HostModel.load(p)
    assert back.config == tiny_host.config
    toks = rng.integers(0, 11, size=9)
    np.testing.assert_array_equal(forward(back, toks).logits, forward(tiny_host, toks).logits)


def test_params_are_read_only(tiny_host):
    with pytest.raises(ValueError):
        tiny_host.params["embed"][0, 0] = 1.0


def test_linear_host_closed_gate():
    m = linear_readout_host(write_gate_bias=-np.inf)
    tr = forward(m, np.arange(10))
    assert np.all(tr.beta == 0)
    assert np.all(tr.states == 0)


def test_config_roundtrip():
    cfg = HostConfig("delta_ungated", n_layers=1, d_k=4, d_v=4, d_model=8, vocab_size=10)
    assert HostConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        HostConfig("softmax")


def test_ungated_host_has_unit_alpha(rng):
    m = init_host(HostConfig("delta_ungated", n_layers=1, d_k=4, d_v=4, d_model=8, vocab_size=10))
    tr = forward(m, rng.integers(0, 10, size=8))
    assert np.all(tr.alpha == 1.0)


def test_markov_host_reaches_entropy_rate():
    P = two_class_chain(8, seed=0)
    data = markov_corpus(P, 400, 32, seed=1)
    cfg = HostConfig("gated_delta", n_layers=1, n_heads=1, d_k=8, d_v=8, d_model=32,
                     vocab_size=8, d_mlp=64, seed=0)
    m = train_toy_host(cfg, data, 300)
    assert m.meta["val_loss"] - entropy_rate(P) < 0.05
