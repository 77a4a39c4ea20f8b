from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import micro_config
from eric import autodiff as ad
from eric.checkpoint import CheckpointError, load_model, read_checkpoint, save_model
from eric.model import EricModel
from eric.training import (Adam, NonFiniteLoss, TrainConfig, batch_for_step, collate, make_batches,
                           read_loss_log, stage2_example, train_loop, train_step)


def test_batch_sizes_and_order(examples):
    data = (list(examples) * 2)[:25]
    sizes = [len(b) for b in make_batches(data, 12, seed=0)]
    assert sizes == [12, 12, 1]
    a = [[id(x) for x in b] for b in make_batches(data, 12, seed=4)]
    assert a == [[id(x) for x in b] for b in make_batches(data, 12, seed=4)]
    assert a != [[id(x) for x in b] for b in make_batches(data, 12, seed=5)]
    with pytest.raises(ValueError):
        next(make_batches([], 3, 0))


def test_batch_for_step_matches_epochs(examples):
    data = list(examples)
    epoch0 = list(make_batches(data, 5, seed=2, epoch=0))
    epoch1 = list(make_batches(data, 5, seed=2, epoch=1))
    stream = [batch_for_step(data, 5, 2, s) for s in range(len(epoch0) + len(epoch1))]
    assert [[id(x) for x in b] for b in stream] == [[id(x) for x in b] for b in epoch0 + epoch1]


def test_padding_does_not_change_losses(examples, micro_model):
    short = min(examples[:6], key=lambda ex: len(ex.output_ids))
    long = max(examples[:6], key=lambda ex: len(ex.output_ids))
    alone = micro_model.forward(collate([short], micro_model.config))
    both = micro_model.forward(collate([short, long], micro_model.config), compute_losses=False)
    T = len(short.output_ids) - 1
    assert np.allclose(alone.logits.data[0], both.logits.data[0, :T], atol=1e-12)
    padded = collate([short, long], micro_model.config)
    lm_alone = ad.cross_entropy(Tensor_(alone.logits.data), collate([short], micro_model.config).tgt_ids,
                                collate([short], micro_model.config).tgt_mask).item()
    lm_masked = ad.cross_entropy(Tensor_(both.logits.data[:1]), padded.tgt_ids[:1], padded.tgt_mask[:1]).item()
    assert abs(lm_alone - lm_masked) < 1e-12


def Tensor_(x):
    return ad.Tensor(x)


def test_adam_hand_arithmetic():
    w = ad.Tensor(np.array([0.0]), requires_grad=True)
    w.grad = np.array([1.0])
    opt = Adam({"w": w}, lr=1e-4)
    opt.step({"w": w})
    # m_hat = 1, v_hat = 1 at t=1
    assert w.data[0] == pytest.approx(-1e-4 * 1.0 / (1.0 + 1e-8), abs=1e-18)


def test_zero_gradients_leave_parameters(micro_model):
    params = {k: ad.Tensor(v.data.copy(), requires_grad=True) for k, v in micro_model.params.items()}
    before = {k: v.data.copy() for k, v in params.items()}
    opt = Adam(params, lr=1e-3)
    for _ in range(3):
        opt.step(params, grad_clip=1.0)
    assert opt.step_count == 3
    assert all(np.array_equal(before[k], params[k].data) for k in params)


def test_gradient_clipping():
    w = ad.Tensor(np.zeros(2), requires_grad=True)
    w.grad = np.array([30.0, 40.0])
    opt = Adam({"w": w}, lr=1.0)
    assert opt.step({"w": w}, grad_clip=1.0) == pytest.approx(50.0)
    assert np.allclose(opt.m["w"], 0.1 * np.array([0.6, 0.8]))


def test_loss_decreases_on_fixed_batch(examples, vocab):
    model = EricModel(micro_config(len(vocab)), seed=0)
    batch = collate(examples[:4], model.config)
    opt = Adam(model.params, lr=3e-3)
    losses = [train_step(model, batch, opt)["total"] for _ in range(50)]
    assert losses[-1] < 0.8 * losses[0]
    cb = model.params["codebook"].data
    assert np.allclose(np.linalg.norm(cb, axis=1), 1.0, atol=1e-6)
    assert not np.any(model.params["tok_emb"].data[model.config.none_id])


def test_nonfinite_loss_aborts_with_dump(tmp_path, examples, vocab):
    cfg = micro_config(len(vocab))
    model = EricModel(cfg, seed=0)
    model.params["dec.0.ff2.b"].data[:] = np.nan
    batch = collate(examples[:2], cfg)
    with pytest.raises(NonFiniteLoss):
        train_step(model, batch, Adam(model.params, 1e-3))


def _train(out, examples, vocab, steps, resume=True, ckpt_every=4, seed=0):
    tcfg = TrainConfig(batch_size=4, learning_rate=1e-3, max_steps=steps, seed=seed,
                       checkpoint_every=ckpt_every, max_seq_len=64)
    return train_loop(tcfg, micro_config(len(vocab)), examples, out, vocab=vocab, resume=resume)


def test_resume_matches_uninterrupted(tmp_path, examples, vocab):
    full = _train(tmp_path / "a", examples, vocab, 8)
    _train(tmp_path / "b", examples, vocab, 4)
    resumed = _train(tmp_path / "b", examples, vocab, 8)
    for k in full.params:
        assert np.array_equal(full.params[k].data, resumed.params[k].data), k
    la = read_loss_log(tmp_path / "a" / "loss_log.jsonl")
    lb = read_loss_log(tmp_path / "b" / "loss_log.jsonl")
    assert la == lb
    assert [r["step"] for r in la] == list(range(1, 9))
    assert set(la[0]) == {"step", "lm", "ent", "cl", "total"}


def test_fixed_seed_is_bit_identical(tmp_path, examples, vocab):
    _train(tmp_path / "a", examples, vocab, 5)
    _train(tmp_path / "b", examples, vocab, 5)
    assert (tmp_path / "a" / "loss_log.jsonl").read_bytes() == (tmp_path / "b" / "loss_log.jsonl").read_bytes()
    assert (tmp_path / "a" / "latest.ckpt").read_bytes() == (tmp_path / "b" / "latest.ckpt").read_bytes()


def test_checkpoint_round_trip_bitwise(tmp_path, micro_model, small_batch):
    save_model(tmp_path / "m.ckpt", micro_model)
    loaded, meta, _ = load_model(tmp_path / "m.ckpt", expected=micro_model.config)
    a = micro_model.forward(small_batch)
    b = loaded.forward(small_batch)
    assert np.array_equal(a.logits.data, b.logits.data)
    assert a.losses() == b.losses()


def test_checkpoint_config_mismatch_and_corruption(tmp_path, micro_model, vocab):
    path = tmp_path / "m.ckpt"
    save_model(path, micro_model)
    with pytest.raises(CheckpointError):
        load_model(path, expected=micro_config(len(vocab), K=16))
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "short.ckpt")


def test_stage2_has_no_state_machinery(tmp_path, examples, vocab):
    cfg = micro_config(len(vocab), architecture="seq2seq", state_injection=False, lambda2=0.0)
    tcfg = TrainConfig(batch_size=4, learning_rate=1e-3, max_steps=3, stage="mention_model", max_seq_len=64)
    train_loop(tcfg, cfg, examples, tmp_path, vocab=vocab)
    _, tensors = read_checkpoint(tmp_path / "latest.ckpt")
    assert not any("codebook" in k or "senc" in k for k in tensors)
    rows = read_loss_log(tmp_path / "loss_log.jsonl")
    assert all(r["ent"] == 0.0 and r["cl"] == 0.0 for r in rows)


def test_stage2_example_layout(examples, vocab):
    ex = examples[0]
    s2 = stage2_example(ex, vocab)
    assert s2.output_ids[0] == vocab.sent_id and s2.output_ids[-1] == vocab.eos_id
    assert s2.input_ids[: len(ex.input_ids)] == ex.input_ids
    assert vocab.eos_id not in s2.input_ids


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(learning_rate=0.0), dict(stage="x")])
def test_train_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_loss_log_is_valid_jsonl(tmp_path, examples, vocab):
    _train(tmp_path, examples, vocab, 3)
    for line in (tmp_path / "loss_log.jsonl").read_text().splitlines():
        row = json.loads(line)
        assert all(np.isfinite(row[k]) for k in ("lm", "ent", "cl", "total"))
