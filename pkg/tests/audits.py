"""Perturbation audits for the decoder's masks, shared by the unit and acceptance tests.

Each audit returns the largest deviation found on rows that must not move;
callers compare it to a tolerance.
"""

from __future__ import annotations

import numpy as np

from eric import autodiff as ad
from eric.autodiff import Tensor
from eric.model import EricModel, ModelConfig, state_key_index


def random_dec_ids(rng, T: int, cfg: ModelConfig) -> np.ndarray:
    """Token ids with <s> at 0 and a few more <s> at random positions."""
    ids = rng.integers(cfg.placeholder_offset, cfg.vocab_size, size=T)
    ids[0] = cfg.sent_id
    n_extra = int(rng.integers(0, max(1, T // 3)))
    if T > 1 and n_extra:
        ids[rng.choice(np.arange(1, T), size=min(n_extra, T - 1), replace=False)] = cfg.sent_id
    return ids


def state_attention_term(model: EricModel, block: int, t: np.ndarray, dec_ids: np.ndarray,
                         key_index=state_key_index) -> np.ndarray:
    """Pre-residual entity-state attention output for hidden rows ``t`` [T, d]."""
    T, d = t.shape
    idx, mask = key_index(dec_ids[None], model.config.sent_id)
    x = Tensor(t[None])
    kv = ad.reshape(ad.take_rows(ad.reshape(x, (T, d)), idx.reshape(-1)), idx.shape + (d,))
    return model.mha(f"dec.{block}.state", x, kv, mask).data[0]


def state_attention_audit(model: EricModel, seed: int, T: int, key_index=state_key_index) -> float:
    """Largest change of h_t when perturbing a non-<s> key or a later <s> key."""
    rng = np.random.default_rng(seed)
    cfg = model.config
    dec_ids = random_dec_ids(rng, T, cfg)
    t = rng.normal(size=(T, cfg.d_model))
    base = state_attention_term(model, 0, t, dec_ids, key_index)
    worst = 0.0
    for j in range(T):
        t2 = t.copy()
        t2[j] += rng.normal(size=cfg.d_model)
        out = state_attention_term(model, 0, t2, dec_ids, key_index)
        if dec_ids[j] == cfg.sent_id:
            keep = np.arange(T) < j           # a <s> key only reaches queries at or after it
        else:
            keep = np.arange(T) != j          # a non-<s> key reaches nobody else
        if keep.any():
            worst = max(worst, float(np.abs(out[keep] - base[keep]).max()))
    return worst


def causality_audit(model: EricModel, seed: int, T: int) -> float:
    """Largest change of H^L / logits at positions < t when decoder input t changes."""
    rng = np.random.default_rng(seed)
    cfg = model.config
    dec_ids = random_dec_ids(rng, T, cfg)
    M = int(rng.integers(1, 6))
    inp = rng.integers(cfg.placeholder_offset, cfg.vocab_size, size=(1, M))
    inp_mask = np.ones((1, M), dtype=bool)
    memory = model.encode_input(inp, inp_mask)
    H0 = rng.normal(size=(1, T, cfg.d_model))
    base = model.output_logits(model.decoder_forward(Tensor(H0), memory, dec_ids[None], inp_mask)).data[0]
    worst = 0.0
    for j in range(1, T):
        H1 = H0.copy()
        H1[0, j] += rng.normal(size=cfg.d_model)
        ids = dec_ids.copy()
        if ids[j] != cfg.sent_id:
            ids[j] = cfg.placeholder_offset + (ids[j] - cfg.placeholder_offset + 1) % (cfg.vocab_size - cfg.placeholder_offset)
        out = model.output_logits(model.decoder_forward(Tensor(H1), memory, ids[None], inp_mask)).data[0]
        worst = max(worst, float(np.abs(out[:j] - base[:j]).max()))
    return worst
