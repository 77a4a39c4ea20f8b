from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audits import causality_audit, state_attention_audit, state_attention_term
from conftest import micro_config
from eric import autodiff as ad
from eric.autodiff import Tensor
from eric.model import (N_ENTITY_CLASSES, EricModel, ModelConfig, causal_mask, contrastive_loss,
                        joint_representation, quantize_state, state_attention_mask, state_key_index,
                        total_loss)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- config ---------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(d_model=10, n_heads=4), dict(K=1), dict(D=1), dict(tau=0.0),
                                 dict(top_p=0.0), dict(top_p=1.5), dict(architecture="rnn")])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=50, **bad)


def test_config_dict_round_trip():
    cfg = micro_config(77, tau=0.2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


# -- quantization ---------------------------------------------------------


def test_quantize_examples():
    cb = np.array([[1.0, 0.0], [0.0, 1.0]])
    k, s = quantize_state(np.array([0.6, 0.8]), cb)
    assert k == 1 and np.array_equal(s, [0.0, 1.0])
    rng = np.random.default_rng(0)
    cb = unit_rows(rng, 6, 4)
    k, s = quantize_state(cb[3], cb)
    assert k == 3 and np.linalg.norm(s - cb[3]) == 0.0
    cb[5] = cb[2]
    e = cb[2]
    assert quantize_state(e, cb)[0] == 2


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quantize_idempotent(seed):
    rng = np.random.default_rng(seed)
    cb = unit_rows(rng, 8, 5)
    e = unit_rows(rng, 1, 5)[0]
    k, s = quantize_state(e, cb)
    assert quantize_state(s, cb)[0] == k
    assert np.all(cb @ e <= cb[k] @ e + 1e-12)


# -- forward trace --------------------------------------------------------


def test_trace_invariants(micro_model, small_batch):
    tr = micro_model.forward(small_batch)
    cb = micro_model.params["codebook"].data
    for name in ("e", "e_hat", "c"):
        v = getattr(tr, name).data
        assert np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-9), name
    assert np.array_equal(tr.s.data, cb[tr.s_index])
    assert tr.s_hat_index.shape == tr.s_index.shape
    B, T = small_batch.dec_ids.shape
    assert tr.logits.shape == (B, T, micro_model.config.vocab_size)
    assert tr.H_L.shape == (B, T, micro_model.config.d_model)
    assert len(tr.t) == len(tr.h) == micro_model.config.n_decoder_blocks
    for v in tr.losses().values():
        assert np.isfinite(v)


def test_forward_is_deterministic(micro_model, small_batch):
    a = micro_model.forward(small_batch).losses()
    b = micro_model.forward(small_batch).losses()
    assert a == b


def test_encode_input_shape_and_order(micro_model, vocab):
    ids = np.array([[10, 11, 12, 13]])
    m = micro_model.encode_input(ids).data
    assert m.shape == (1, 4, 16)
    assert not np.allclose(m, micro_model.encode_input(ids[:, ::-1]).data[:, ::-1])


def test_sentence_event_unit_and_range(micro_model):
    tok = np.array([[2, 10, 11, 12]])
    e = micro_model.encode_sentence_event(tok, np.ones_like(tok, dtype=bool), np.array([1])).data
    assert abs(np.linalg.norm(e) - 1.0) < 1e-9
    with pytest.raises(IndexError):
        micro_model.encode_sentence_event(tok, np.ones_like(tok, dtype=bool), np.array([4]))


# -- decoder input --------------------------------------------------------


def _compose(model, batch, states):
    return model.compose_decoder_input(batch.dec_ids, batch.sent_start, batch.sent_mask, batch.ent_tok,
                                       None if states is None else Tensor(states)).data


def test_compose_none_and_locality(micro_model, small_batch):
    cfg = micro_model.config
    b = small_batch
    rng = np.random.default_rng(0)
    states = rng.normal(size=(b.size, b.n_slots, cfg.D))
    states[b.ent_tok == cfg.none_id] = 0.0
    H0 = _compose(micro_model, b, states)
    E = micro_model.embed(b.dec_ids).data
    none = np.argwhere(b.sent_mask & (b.ent_tok == cfg.none_id))
    assert len(none) > 0
    for bi, n in none:
        t = b.sent_start[bi, n]
        assert np.array_equal(H0[bi, t], E[bi, t])
    # changing s_n moves only its <s> row
    bi, n = np.argwhere(b.sent_mask & (b.ent_tok != cfg.none_id))[0]
    s2 = states.copy()
    s2[bi, n] += 1.0
    diff = np.abs(_compose(micro_model, b, s2) - H0).sum(axis=-1)
    assert set(zip(*np.nonzero(diff))) == {(bi, b.sent_start[bi, n])}


def test_compose_zero_projection(micro_model, small_batch):
    b = small_batch
    model = EricModel(micro_model.config, params={k: Tensor(v.data.copy()) for k, v in micro_model.params.items()})
    model.params["state_proj.w"].data[:] = 0.0
    states = np.random.default_rng(1).normal(size=(b.size, b.n_slots, model.config.D))
    H0 = _compose(model, b, states)
    assert np.array_equal(H0, _compose(model, b, None))
    E = model.embed(b.dec_ids).data
    emb = model.params["tok_emb"].data
    bi, n = np.argwhere(b.sent_mask & (b.ent_tok != model.config.none_id))[0]
    t = b.sent_start[bi, n]
    assert np.allclose(H0[bi, t], E[bi, t] + emb[b.ent_tok[bi, n]], atol=1e-15)


def test_compose_rejects_bad_shapes(micro_model, small_batch):
    b = small_batch
    with pytest.raises(ValueError):
        _compose(micro_model, b, np.zeros((b.size, b.n_slots + 1, micro_model.config.D)))


# -- entity-state attention -----------------------------------------------


def test_state_key_index_matches_full_mask():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ids = rng.integers(5, 9, size=(3, 12))
        ids[rng.random(ids.shape) < 0.3] = 2
        ids[:, 0] = 2
        full = state_attention_mask(ids, 2)
        idx, mask = state_key_index(ids, 2)
        rebuilt = np.zeros_like(full)
        for b in range(3):
            for j, flat in enumerate(idx[b]):
                rebuilt[b, :, flat - 12 * b] |= mask[b, :, j]
        assert np.array_equal(rebuilt, full)
    with pytest.raises(ValueError):
        state_key_index(np.array([[5, 2, 6]]), 2)


def test_state_attention_singleton_is_value_projection(micro_model):
    p = micro_model.params
    ids = np.array([2, 7, 8, 9, 2, 7])
    t = np.random.default_rng(0).normal(size=(6, 16))
    out = state_attention_term(micro_model, 0, t, ids)
    v = t[0] @ p["dec.0.state.v.w"].data + p["dec.0.state.v.b"].data
    expected = v @ p["dec.0.state.o.w"].data + p["dec.0.state.o.b"].data
    assert np.allclose(out[:4], expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_state_attention_mask_audit(micro_model, seed):
    assert state_attention_audit(micro_model, seed, T=4 + seed) == 0.0


def test_audit_detects_a_leaky_mask(micro_model):
    def leaky(dec_ids, sent_id):
        B, T = dec_ids.shape
        return np.arange(B * T).reshape(B, T), np.broadcast_to(causal_mask(T), (B, T, T))

    assert max(state_attention_audit(micro_model, s, 10, key_index=leaky) for s in range(5)) > 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_decoder_causality_audit(micro_model, seed):
    assert causality_audit(micro_model, seed, T=4 + seed) < 1e-12


def test_training_logits_causal_given_states(micro_model, small_batch):
    b = small_batch
    states = np.random.default_rng(2).normal(size=(b.size, b.n_slots, micro_model.config.D))
    base = micro_model.forward(b, states=states, compute_losses=False).logits.data
    j = b.sent_start[0, 1] + 1
    b.dec_ids[0, j] = b.dec_ids[0, j] + 1
    try:
        out = micro_model.forward(b, states=states, compute_losses=False).logits.data
    finally:
        b.dec_ids[0, j] -= 1
    assert np.abs(out[0, :j] - base[0, :j]).max() < 1e-12
    assert np.abs(out[0, j:] - base[0, j:]).max() > 0


# -- entity and state prediction ------------------------------------------


def test_entity_distribution(micro_model):
    q = Tensor(np.random.default_rng(0).normal(size=(3, 16)))
    p = micro_model.predict_next_entity(q)
    assert p.shape == (3, N_ENTITY_CLASSES) and np.allclose(p.sum(-1), 1.0)
    zero = EricModel(micro_model.config, params={k: Tensor(v.data.copy()) for k, v in micro_model.params.items()})
    zero.params["ent_head.w"].data[:] = 0
    zero.params["ent_head.b"].data[:] = 0
    assert np.allclose(zero.predict_next_entity(q), 1.0 / N_ENTITY_CLASSES, atol=1e-15)


def test_state_prediction(micro_model):
    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(size=16))
    prefix = Tensor(rng.normal(size=(5, 16)))
    a = micro_model.predict_state_representation(q, 5, prefix).data
    b = micro_model.predict_state_representation(q, 6, prefix).data
    assert abs(np.linalg.norm(a) - 1) < 1e-9 and not np.allclose(a, b)
    with pytest.raises(ValueError):
        micro_model.predict_state_representation(q, 5, Tensor(np.zeros((0, 16))))
    # one prefix row: attention output is its value projection
    p = micro_model.params
    one = prefix.data[:1]
    v = one @ p["stateq.v.w"].data + p["stateq.v.b"].data
    o = v @ p["stateq.o.w"].data + p["stateq.o.b"].data
    z = (o @ p["stateq_proj.w"].data + p["stateq_proj.b"].data)[0]
    got = micro_model.predict_state_representation(q, 5, Tensor(one)).data
    assert np.allclose(got, z / np.linalg.norm(z), atol=1e-12)


# -- losses ---------------------------------------------------------------


def test_infonce_closed_forms():
    one = Tensor(np.array([[1.0, 0.0]]))
    assert contrastive_loss(one, one, 0.1).item() == 0.0
    c = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    got = contrastive_loss(one, c, 0.1).item()
    assert abs(got - np.log1p(np.exp(-20.0))) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_infonce_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    e_hat = Tensor(unit_rows(rng, n, 6))
    c = joint_representation(Tensor(unit_rows(rng, n, 6)), Tensor(unit_rows(rng, n, 6)))
    assert contrastive_loss(e_hat, c, float(rng.uniform(0.05, 1.0))).item() >= 0.0


def test_lm_loss_uniform():
    logits = Tensor(np.zeros((1, 3, 4)))
    assert abs(ad.cross_entropy(logits, np.array([[0, 1, 3]])).item() - np.log(4)) < 1e-15


def test_entity_loss_one_hot():
    logits = np.full((2, N_ENTITY_CLASSES), -50.0)
    logits[0, 3] = logits[1, 100] = 50.0
    assert ad.cross_entropy(Tensor(logits), np.array([3, 100])).item() < 1e-30


def test_total_loss_weights():
    lm, ent, cl = Tensor(2.5), Tensor(1.25), Tensor(0.75)
    assert total_loss(lm, ent, cl, 0.0, 0.0).item() == 2.5
    t1 = total_loss(lm, ent, cl, 1.0, 1.0).item()
    t2 = total_loss(lm, ent, cl, 1.0, 2.0).item()
    assert t2 - t1 == pytest.approx(0.75, abs=1e-15)


def test_lm_gradient_reaches_both_encoders(micro_model, small_batch):
    micro_model.zero_grad()
    tr = micro_model.forward(small_batch)
    ad.backward(tr.lm)
    p = micro_model.params
    for prefix in ("enc.", "senc."):
        grads = [np.abs(p[k].grad).sum() for k in p if k.startswith(prefix) and p[k].grad is not None]
        assert grads and sum(grads) > 0, prefix
    assert p["codebook"].grad is None or not np.any(p["codebook"].grad)
    micro_model.zero_grad()


def test_codebook_gradient_only_through_contrastive(micro_model, small_batch):
    micro_model.zero_grad()
    tr = micro_model.forward(small_batch)
    ad.backward(total_loss(tr.lm, tr.ent, Tensor(0.0), 1.0, 0.0))
    g = micro_model.params["codebook"].grad
    assert g is None or not np.any(g)
    micro_model.zero_grad()
    ad.backward(micro_model.forward(small_batch).cl)
    assert np.any(micro_model.params["codebook"].grad)
    micro_model.zero_grad()


def test_seq2seq_has_no_state_parameters(vocab):
    m = EricModel(micro_config(len(vocab), architecture="seq2seq", state_injection=False))
    assert not any(k.startswith(("senc", "codebook", "stateq", "ent_head", "state_proj")) or ".state." in k
                   for k in m.params)


def test_enforce_constraints(micro_model):
    m = EricModel(micro_model.config, seed=9)
    m.params["tok_emb"].data[m.config.none_id] = 3.0
    m.params["codebook"].data *= 2.0
    m.enforce_constraints()
    assert not np.any(m.params["tok_emb"].data[m.config.none_id])
    assert np.allclose(np.linalg.norm(m.params["codebook"].data, axis=1), 1.0, atol=1e-12)
