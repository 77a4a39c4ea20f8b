"""The entity-state transformer: encoders, decoder, codebook and losses.

Shapes: B batch, M input length, T decoder length, N sentence slots per
example, S sentences that mention an entity (flattened over the batch),
d model width, D state width, K codebook size.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import make_rng
from .text import MAX_ENTITIES

log = logging.getLogger(__name__)

N_ENTITY_CLASSES = MAX_ENTITIES + 1  # placeholders + <none>


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_decoder_blocks: int = 2
    n_encoder_blocks: int = 2
    d_ff: int = 256
    K: int = 512
    D: int = 128
    tau: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    max_seq_len: int = 512
    top_p: float = 0.9
    architecture: str = "eric"  # "eric" (stage 1) or "seq2seq" (stage 2)
    state_injection: bool = True
    pad_id: int = 0
    sent_id: int = 2
    eos_id: int = 3
    none_id: int = 4
    placeholder_offset: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.K < 2 or self.D < 2:
            raise ValueError("codebook needs K >= 2 and D >= 2")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.architecture not in ("eric", "seq2seq"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if min(self.n_decoder_blocks, self.n_encoder_blocks, self.d_ff, self.vocab_size) < 1:
            raise ValueError("block counts, d_ff and vocab_size must be positive")

    @property
    def stateful(self) -> bool:
        return self.architecture == "eric"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# batches and traces


@dataclass
class Batch:
    """Padded arrays for a set of examples (see :func:`eric.training.collate`)."""

    inp_ids: np.ndarray        # [B, M]
    inp_mask: np.ndarray       # [B, M] bool
    dec_ids: np.ndarray        # [B, T] decoder inputs (output_ids[:-1])
    tgt_ids: np.ndarray        # [B, T]
    tgt_mask: np.ndarray       # [B, T] bool
    sent_start: np.ndarray     # [B, N]
    sent_end: np.ndarray       # [B, N]
    sent_mask: np.ndarray      # [B, N] bool
    ent_tok: np.ndarray        # [B, N] placeholder token id, none_id when absent
    ent_cls: np.ndarray        # [B, N] entity class index
    ent_slots: np.ndarray      # [S] flat b*N+n index of slots that mention an entity
    sent_tok: np.ndarray       # [S, Ls] tokens of those sentences
    sent_tok_mask: np.ndarray  # [S, Ls] bool
    ph_pos: np.ndarray         # [S] position of p_n inside its sentence
    gold_states: list | None = None

    @property
    def size(self) -> int:
        return self.inp_ids.shape[0]

    @property
    def n_slots(self) -> int:
        return self.sent_start.shape[1]


@dataclass
class ForwardTrace:
    H0: Tensor
    t: list[Tensor] = field(default_factory=list)       # per block, post-LN self-attention
    h: list[Tensor] = field(default_factory=list)       # per block, post-LN state attention
    H_L: Tensor | None = None
    logits: Tensor | None = None
    memory: Tensor | None = None
    q: Tensor | None = None                  # [B, N, d] context summaries
    ent_logits: Tensor | None = None         # [B, N, 101]
    e: Tensor | None = None                  # [S, D] event representations
    s: Tensor | None = None                  # [S, D] quantized gold states (codebook rows)
    s_index: np.ndarray | None = None        # [S]
    e_hat: Tensor | None = None              # [S, D] predicted state representations
    s_hat_index: np.ndarray | None = None    # [S]
    c: Tensor | None = None                  # [S, D] joint representations
    lm: Tensor | None = None
    ent: Tensor | None = None
    cl: Tensor | None = None
    total: Tensor | None = None

    def losses(self) -> dict[str, float]:
        out = {}
        for k in ("lm", "ent", "cl", "total"):
            v = getattr(self, k)
            out[k] = float(v.item()) if v is not None else 0.0
        return out


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return ad.affine(x, w, b)


def quantize_state(e: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook row on the unit sphere (max dot product, lowest index on ties).

    Works on a single vector ``[D]`` or a stack ``[..., D]``.
    """
    scores = np.asarray(e) @ np.asarray(codebook).T
    k = np.argmax(scores, axis=-1)
    return k, np.asarray(codebook)[k]


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def state_attention_mask(dec_ids: np.ndarray, sent_id: int) -> np.ndarray:
    """``mask[..., t, j]``: key j is a ``<s>`` position with j <= t."""
    dec_ids = np.asarray(dec_ids)
    T = dec_ids.shape[-1]
    is_s = dec_ids == sent_id
    if not np.all(is_s[..., 0]):
        raise ValueError("decoder input must start with <s> so every query has a state key")
    return causal_mask(T) & is_s[..., None, :]


def state_key_index(dec_ids: np.ndarray, sent_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Gather form of :func:`state_attention_mask`.

    Returns flat row indices ``[B, Nk]`` of the ``<s>`` positions (padded by
    repeating row 0 of each example) and the key mask ``[B, T, Nk]``. Attending
    over the gathered rows is identical to attending over all positions with
    the full mask, since the excluded keys carry zero weight either way.
    """
    dec_ids = np.atleast_2d(dec_ids)
    B, T = dec_ids.shape
    is_s = dec_ids == sent_id
    if not np.all(is_s[:, 0]):
        raise ValueError("decoder input must start with <s> so every query has a state key")
    counts = is_s.sum(axis=1)
    Nk = int(counts.max())
    pos = np.zeros((B, Nk), dtype=np.int64)
    valid = np.zeros((B, Nk), dtype=bool)
    for b in range(B):
        p = np.flatnonzero(is_s[b])
        pos[b, : len(p)] = p
        valid[b, : len(p)] = True
    mask = valid[:, None, :] & (pos[:, None, :] <= np.arange(T)[None, :, None])
    return pos + T * np.arange(B)[:, None], mask


class EricModel:
    """Parameters plus the forward computations; the params dict is the whole state."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = params if params is not None else self._init_params(seed)

    # -- parameters -----------------------------------------------------

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.config
        rng = make_rng(seed, "init")
        d, ff = cfg.d_model, cfg.d_ff
        p: dict[str, np.ndarray] = {}

        def lin(name, n_in, n_out, bias=True):
            p[name + ".w"] = rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))
            if bias:
                p[name + ".b"] = np.zeros(n_out)

        def ln(name, n):
            p[name + ".g"] = np.ones(n)
            p[name + ".b"] = np.zeros(n)

        def attn(name):
            for part in ("q", "k", "v", "o"):
                lin(f"{name}.{part}", d, d)

        def enc_block(name):
            attn(name + ".attn")
            ln(name + ".ln1", d)
            lin(name + ".ff1", d, ff)
            lin(name + ".ff2", ff, d)
            ln(name + ".ln2", d)

        p["tok_emb"] = rng.normal(0.0, 0.1, size=(cfg.vocab_size, d))
        p["tok_emb"][cfg.none_id] = 0.0
        p["pos_emb"] = rng.normal(0.0, 0.1, size=(cfg.max_seq_len, d))
        for i in range(cfg.n_encoder_blocks):
            enc_block(f"enc.{i}")
        for i in range(cfg.n_decoder_blocks):
            name = f"dec.{i}"
            attn(name + ".self")
            ln(name + ".ln1", d)
            if cfg.stateful:
                attn(name + ".state")
                ln(name + ".ln2", d)
            attn(name + ".cross")
            ln(name + ".ln3", d)
            lin(name + ".ff1", d, ff)
            lin(name + ".ff2", ff, d)
            ln(name + ".ln4", d)
        if cfg.stateful:
            for i in range(cfg.n_encoder_blocks):
                enc_block(f"senc.{i}")
            lin("senc_proj", d, cfg.D)
            lin("state_proj", cfg.D, d, bias=False)
            lin("ent_head", d, N_ENTITY_CLASSES)
            attn("stateq")
            lin("stateq_proj", d, cfg.D)
            cb = rng.normal(size=(cfg.K, cfg.D))
            p["codebook"] = cb / np.linalg.norm(cb, axis=1, keepdims=True)
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def enforce_constraints(self) -> None:
        """Pin the <none> embedding to zero and re-project codebook rows to unit norm."""
        self.params["tok_emb"].data[self.config.none_id] = 0.0
        if "codebook" in self.params:
            cb = self.params["codebook"].data
            cb /= np.linalg.norm(cb, axis=1, keepdims=True)

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- sublayers ------------------------------------------------------

    def embed(self, ids: np.ndarray, positions: np.ndarray | None = None) -> Tensor:
        ids = np.asarray(ids)
        if positions is None:
            positions = np.broadcast_to(np.arange(ids.shape[-1]), ids.shape)
        return ad.add(ad.embedding(self._p("tok_emb"), ids, frozen_rows=(self.config.none_id,)),
                      ad.embedding(self._p("pos_emb"), positions))

    def project_kv(self, name: str, x: Tensor) -> tuple[Tensor, Tensor]:
        return (linear(x, self._p(name + ".k.w"), self._p(name + ".k.b")),
                linear(x, self._p(name + ".v.w"), self._p(name + ".v.b")))

    def attend(self, name: str, xq: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
        q = linear(xq, self._p(name + ".q.w"), self._p(name + ".q.b"))
        out = ad.masked_attention(q, k, v, mask, self.config.n_heads)
        return linear(out, self._p(name + ".o.w"), self._p(name + ".o.b"))

    def mha(self, name: str, xq: Tensor, xkv: Tensor, mask) -> Tensor:
        k, v = self.project_kv(name, xkv)
        return self.attend(name, xq, k, v, mask)

    def ln(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self._p(name + ".g"), self._p(name + ".b"))

    def ffn(self, name: str, x: Tensor) -> Tensor:
        h = ad.gelu(linear(x, self._p(name + ".ff1.w"), self._p(name + ".ff1.b")))
        return linear(h, self._p(name + ".ff2.w"), self._p(name + ".ff2.b"))

    def _encoder(self, prefix: str, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        x = self.embed(ids)
        key_mask = ad.mask_bias(np.asarray(mask, dtype=bool)[..., None, :])
        for i in range(self.config.n_encoder_blocks):
            name = f"{prefix}.{i}"
            x = self.ln(name + ".ln1", ad.add(x, self.mha(name + ".attn", x, x, key_mask)))
            x = self.ln(name + ".ln2", ad.add(x, self.ffn(name, x)))
        return x

    # -- public pieces --------------------------------------------------

    def encode_input(self, inp_ids: np.ndarray, inp_mask: np.ndarray | None = None) -> Tensor:
        """Bidirectional encoding of X, used as cross-attention memory. [B, M, d]"""
        inp_ids = np.atleast_2d(inp_ids)
        if inp_mask is None:
            inp_mask = np.ones(inp_ids.shape, dtype=bool)
        if inp_ids.shape[-1] > self.config.max_seq_len:
            log.warning("input of length %d truncated to %d", inp_ids.shape[-1], self.config.max_seq_len)
            inp_ids = inp_ids[..., : self.config.max_seq_len]
            inp_mask = inp_mask[..., : self.config.max_seq_len]
        return self._encoder("enc", inp_ids, inp_mask)

    def encode_sentence_event(self, sent_tok: np.ndarray, sent_mask: np.ndarray,
                              ph_pos: np.ndarray) -> Tensor:
        """Unit event representations e_n read at the placeholder positions. [S, D]"""
        sent_tok = np.atleast_2d(sent_tok)
        ph_pos = np.atleast_1d(ph_pos)
        if np.any(ph_pos < 0) or np.any(ph_pos >= sent_tok.shape[1]):
            raise IndexError("placeholder position out of range")
        h = self._encoder("senc", sent_tok, np.atleast_2d(sent_mask))
        S, L, d = h.shape
        rows = ad.take_rows(ad.reshape(h, (S * L, d)), np.arange(S) * L + ph_pos)
        return ad.l2_normalize(linear(rows, self._p("senc_proj.w"), self._p("senc_proj.b")))

    def decoder_block(self, i: int, x: Tensor, memory: Tensor, self_mask, state_keys, cross_mask,
                      trace: ForwardTrace | None = None) -> Tensor:
        """One block. ``state_keys`` is ``(flat_index, mask)`` from :func:`state_key_index`."""
        name = f"dec.{i}"
        t = self.ln(name + ".ln1", ad.add(x, self.mha(name + ".self", x, x, self_mask)))
        if trace is not None:
            trace.t.append(t)
        if self.config.stateful:
            B, T, d = t.shape
            idx, smask = state_keys
            kv = ad.reshape(ad.take_rows(ad.reshape(t, (B * T, d)), idx.reshape(-1)), idx.shape + (d,))
            t = self.ln(name + ".ln2", ad.add(t, self.mha(name + ".state", t, kv, smask)))
            if trace is not None:
                trace.h.append(t)
        u = self.ln(name + ".ln3", ad.add(t, self.mha(name + ".cross", t, memory, cross_mask)))
        return self.ln(name + ".ln4", ad.add(u, self.ffn(name, u)))

    def decoder_forward(self, H0: Tensor, memory: Tensor, dec_ids: np.ndarray,
                        inp_mask: np.ndarray, trace: ForwardTrace | None = None) -> Tensor:
        dec_ids = np.atleast_2d(dec_ids)
        T = dec_ids.shape[-1]
        self_mask = ad.mask_bias(causal_mask(T)[None])
        state_keys = None
        if self.config.stateful:
            idx, smask = state_key_index(dec_ids, self.config.sent_id)
            state_keys = (idx, ad.mask_bias(smask))
        cross_mask = ad.mask_bias(np.asarray(inp_mask, dtype=bool)[:, None, :])
        x = H0
        for i in range(self.config.n_decoder_blocks):
            x = self.decoder_block(i, x, memory, self_mask, state_keys, cross_mask, trace)
        return x

    def output_logits(self, H: Tensor) -> Tensor:
        """Tied output projection; <pad> and <none> are never predicted."""
        logits = ad.matmul(H, ad.transpose(self._p("tok_emb")))
        bias = np.zeros(self.config.vocab_size)
        bias[[self.config.pad_id, self.config.none_id]] = ad.MASK_VALUE
        return ad.add(logits, bias)

    def entity_logits(self, q: Tensor) -> Tensor:
        return linear(q, self._p("ent_head.w"), self._p("ent_head.b"))

    def predict_next_entity(self, q_prev: Tensor) -> np.ndarray:
        """Distribution over the 100 placeholders and <none> (last entry)."""
        return ad.softmax(self.entity_logits(q_prev)).data

    def state_representation(self, query: Tensor, keys: Tensor, mask) -> Tensor:
        """Normalize(A(Q=query, K/V=keys)) projected to D dims."""
        k, v = self.project_kv("stateq", keys)
        a = self.attend("stateq", query, k, v, mask)
        return ad.l2_normalize(linear(a, self._p("stateq_proj.w"), self._p("stateq_proj.b")))

    def predict_state_representation(self, q_prev: Tensor, entity_id: int, prefix_hidden: Tensor) -> Tensor:
        """ê for one sentence: query q_prev + E(entity) over prefix hidden states [L, d]."""
        if prefix_hidden.shape[0] == 0:
            raise ValueError("state prediction needs at least one prefix hidden state")
        query = ad.add(ad.reshape(q_prev, (1, -1)), ad.embedding(self._p("tok_emb"), [entity_id]))
        return ad.reshape(self.state_representation(query, prefix_hidden, None), (-1,))

    def state_injection(self, ent_tok: np.ndarray, states: Tensor | None) -> Tensor:
        """Per-slot additions E(p_n) + W s_n; exactly zero where p_n is <none>. [B, N, d]"""
        has = (np.asarray(ent_tok) != self.config.none_id)[..., None].astype(float)
        inj = ad.mul(ad.embedding(self._p("tok_emb"), ent_tok, frozen_rows=(self.config.none_id,)), has)
        if states is not None and self.config.state_injection:
            inj = ad.add(inj, ad.matmul(states, self._p("state_proj.w")))
        return inj

    def compose_decoder_input(self, dec_ids: np.ndarray, sent_start: np.ndarray, sent_mask: np.ndarray,
                              ent_tok: np.ndarray, states: Tensor | None) -> Tensor:
        """H0 = E(y)+P(t), plus E(p_n) + projected s_n at each sentence's <s>."""
        dec_ids = np.atleast_2d(dec_ids)
        B, T = dec_ids.shape
        sent_start = np.atleast_2d(sent_start)
        N = sent_start.shape[1]
        if states is not None and tuple(states.shape[:2]) != (B, N):
            raise ValueError(f"states shape {states.shape} does not match {B} examples x {N} sentences")
        place = np.zeros((B, T, N))
        bi, ni = np.nonzero(np.atleast_2d(sent_mask))
        place[bi, sent_start[bi, ni], ni] = 1.0
        if not np.all(dec_ids[bi, sent_start[bi, ni]] == self.config.sent_id):
            raise ValueError("sentence spans must start at <s> tokens")
        inj = self.state_injection(np.atleast_2d(ent_tok), states)
        return ad.add(self.embed(dec_ids), ad.matmul(place, inj))

    # -- training forward -----------------------------------------------

    def forward(self, batch: Batch, states: np.ndarray | None = None,
                quant_override: dict | None = None, compute_losses: bool = True) -> ForwardTrace:
        """Teacher-forced forward pass.

        ``states`` ([B, N, D], constant) replaces the gold quantized states fed
        at ``<s>`` (used for scoring). ``quant_override`` with keys ``k`` and
        ``e_ref`` freezes code assignments and feeds ``d_k + (e - e_ref)``,
        the smooth surrogate whose exact gradient is the straight-through one.
        An optional ``s_ref`` pins the ``d_k`` seen by the decoder too, so that
        finite differences on the codebook see only the contrastive path.
        """
        cfg = self.config
        memory = self.encode_input(batch.inp_ids, batch.inp_mask)
        B, N = batch.sent_start.shape
        S = len(batch.ent_slots)
        trace = ForwardTrace(H0=None, memory=memory)

        state_tensor = None
        if cfg.stateful and states is not None:
            state_tensor = Tensor(states)
        elif cfg.stateful and S and cfg.state_injection:
            e = self.encode_sentence_event(batch.sent_tok, batch.sent_tok_mask, batch.ph_pos)
            trace.e = e
            cb = self._p("codebook")
            if quant_override is None:
                k, _ = quantize_state(e.data, cb.data)
                s = ad.take_rows(cb, k)
                s_dec = ad.straight_through(e, s)
            else:
                k = np.asarray(quant_override["k"])
                s = ad.take_rows(cb, k)
                d_k = quant_override.get("s_ref", cb.data[k])
                s_dec = ad.add(Tensor(d_k), ad.sub(e, Tensor(quant_override["e_ref"])))
            trace.s, trace.s_index = s, k
            slot_rows = np.zeros(B * N, dtype=np.int64)
            slot_rows[batch.ent_slots] = np.arange(1, S + 1)
            padded = ad.concat([Tensor(np.zeros((1, cfg.D))), s_dec], axis=0)
            state_tensor = ad.reshape(ad.take_rows(padded, slot_rows), (B, N, cfg.D))

        H0 = self.compose_decoder_input(batch.dec_ids, batch.sent_start, batch.sent_mask,
                                        batch.ent_tok, state_tensor)
        trace.H0 = H0
        H = self.decoder_forward(H0, memory, batch.dec_ids, batch.inp_mask, trace)
        trace.H_L = H
        trace.logits = self.output_logits(H)
        if not compute_losses:
            return trace
        trace.lm = ad.cross_entropy(trace.logits, batch.tgt_ids, batch.tgt_mask)
        if not cfg.stateful:
            trace.total = trace.lm
            return trace

        ctx, pool, keymask = self._context(batch, memory, H)
        trace.q = ad.matmul(pool, ctx)
        trace.ent_logits = self.entity_logits(trace.q)
        trace.ent = ad.cross_entropy(trace.ent_logits, batch.ent_cls, batch.sent_mask)

        if S and trace.e is None and cfg.lambda2 != 0:
            trace.e = self.encode_sentence_event(batch.sent_tok, batch.sent_tok_mask, batch.ph_pos)
        if S:
            query = ad.add(trace.q, ad.mul(
                ad.embedding(self._p("tok_emb"), batch.ent_tok, frozen_rows=(cfg.none_id,)),
                (batch.ent_tok != cfg.none_id)[..., None].astype(float)))
            e_hat_all = self.state_representation(query, ctx, keymask)
            trace.e_hat = ad.take_rows(ad.reshape(e_hat_all, (B * N, cfg.D)), batch.ent_slots)
            trace.s_hat_index, _ = quantize_state(trace.e_hat.data, self._p("codebook").data)
        if S and trace.e is not None:
            if trace.s is None:
                k, _ = quantize_state(trace.e.data, self._p("codebook").data)
                trace.s, trace.s_index = ad.take_rows(self._p("codebook"), k), k
            trace.c = ad.l2_normalize(ad.add(trace.e, trace.s))
            trace.cl = contrastive_loss(trace.e_hat, trace.c, cfg.tau)
        else:
            trace.cl = Tensor(0.0)
        trace.total = total_loss(trace.lm, trace.ent, trace.cl, cfg.lambda1, cfg.lambda2)
        return trace

    def _context(self, batch: Batch, memory: Tensor, H: Tensor):
        """Keys [memory; H^L], mean-pool weights for q_{n-1}, and prefix masks for ê_n."""
        B, N = batch.sent_start.shape
        M = memory.shape[1]
        T = H.shape[1]
        ctx = ad.concat([memory, H], axis=1)
        pool = np.zeros((B, N, M + T))
        keymask = np.zeros((B, N, M + T), dtype=bool)
        for b in range(B):
            m_valid = np.asarray(batch.inp_mask[b], dtype=bool)
            for n in range(N):
                if not batch.sent_mask[b, n]:
                    pool[b, n, 0] = 1.0
                    keymask[b, n, 0] = True
                elif n == 0:
                    pool[b, n, :M] = m_valid / m_valid.sum()
                    keymask[b, n, :M] = m_valid
                else:
                    s, e = batch.sent_start[b, n - 1], batch.sent_end[b, n - 1]
                    pool[b, n, M + s: M + e] = 1.0 / (e - s)
                    keymask[b, n, M: M + batch.sent_start[b, n]] = True
        return ctx, pool, keymask

    # -- inference helpers ------------------------------------------------

    def quantize(self, e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return quantize_state(e, self._p("codebook").data)


def contrastive_loss(e_hat: Tensor, c: Tensor, tau: float) -> Tensor:
    """infoNCE: row n of ``e_hat`` is pulled to row n of ``c``, pushed from the rest of ``c``."""
    if e_hat.shape[0] == 0:
        return Tensor(0.0)
    logits = ad.mul(ad.matmul(e_hat, ad.transpose(c)), 1.0 / tau)
    return ad.cross_entropy(logits, np.arange(e_hat.shape[0]))


def joint_representation(e: Tensor, s: Tensor) -> Tensor:
    return ad.l2_normalize(ad.add(e, s))


def total_loss(lm: Tensor, ent: Tensor, cl: Tensor, lambda1: float, lambda2: float) -> Tensor:
    return ad.add(ad.add(lm, ad.mul(ent, lambda1)), ad.mul(cl, lambda2))
