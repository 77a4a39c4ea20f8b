"""Two-stage sampling: anonymized narrative with entity states, then mentions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Batch, EricModel, causal_mask
from .rng import make_rng
from .text import (MAX_ENTITIES, MAX_SENTENCES, AnonymizedExample, Vocabulary,
                   parse_mention_pairs, placeholder_index, restore_mentions, split_tokens)

log = logging.getLogger(__name__)

SENTENCE_TOKEN_CAP = 40


@dataclass
class GenerationConfig:
    top_p: float = 0.9
    greedy_entities: bool = False
    max_sentences: int = MAX_SENTENCES
    sentence_token_cap: int = SENTENCE_TOKEN_CAP
    max_seq_len: int = 512
    max_mention_tokens: int = 256

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_sentences < 1 or self.sentence_token_cap < 1:
            raise ValueError("sentence caps must be positive")


@dataclass
class GenerationOutput:
    input_text: str
    anonymized_ids: list[int]
    predicted_entity: list[int | None]      # placeholder index per sentence, None for <none>
    state_index: list[int | None]
    mention_map: list[str | None] = field(default_factory=list)
    final_text: str = ""
    seed: int = 0
    truncated: bool = False

    def to_json(self, vocab: Vocabulary) -> dict:
        return {
            "input": self.input_text,
            "anonymized": vocab.detokenize(t for t in self.anonymized_ids
                                           if t not in (vocab.sent_id, vocab.eos_id)),
            "entities": [None if p is None else f"<e{p}>" for p in self.predicted_entity],
            "states": list(self.state_index),
            "text": self.final_text,
            "seed": self.seed,
        }


def nucleus(probs: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and renormalized probabilities of the top-p nucleus.

    Tokens are sorted by descending probability, ties by ascending id, and the
    shortest prefix whose mass reaches ``p`` is kept.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0, atol=1e-6):
        raise ValueError("expected a probability vector")
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    order = np.lexsort((np.arange(len(probs)), -probs))
    cum = np.cumsum(probs[order])
    # guard against the total falling a hair short of 1.0
    cut = int(np.searchsorted(cum, min(p, cum[-1]) - 1e-12)) + 1
    keep = order[:cut]
    kept = probs[keep]
    return keep, kept / kept.sum()


def top_p_sample(probs: np.ndarray, p: float, rng: np.random.Generator | int) -> int:
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng), "top_p")
    ids, q = nucleus(probs, p)
    return int(ids[rng.choice(len(ids), p=q)])


def _restricted_probs(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    z = np.where(allowed, logits, -np.inf)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _frozen(model: EricModel) -> EricModel:
    """Same parameters without gradient tracking, so no graph is recorded."""
    return EricModel(model.config, params={k: Tensor(t.data, name=k) for k, t in model.params.items()})


class IncrementalDecoder:
    """Decoder with per-block key/value caches for one sequence.

    Self-attention caches every position; entity-state attention caches only
    the ``<s>`` rows; cross-attention keys/values are computed once.
    """

    def __init__(self, model: EricModel, memory: Tensor):
        self.model = model
        cfg = model.config
        self.memory = memory
        self.self_kv: list[list[list[np.ndarray]]] = [[[], []] for _ in range(cfg.n_decoder_blocks)]
        self.state_kv: list[list[list[np.ndarray]]] = [[[], []] for _ in range(cfg.n_decoder_blocks)]
        self.cross_kv = [model.project_kv(f"dec.{i}.cross", memory) for i in range(cfg.n_decoder_blocks)]
        self.hidden: list[np.ndarray] = []  # H^L rows
        self.ids: list[int] = []

    @property
    def length(self) -> int:
        return len(self.ids)

    def step(self, token: int, injection: np.ndarray | None = None) -> np.ndarray:
        """Feed one token (plus its ``<s>`` injection); returns next-token logits."""
        m, cfg = self.model, self.model.config
        pos = self.length
        if pos >= cfg.max_seq_len:
            raise IndexError("sequence is longer than max_seq_len")
        x = m.embed(np.array([[token]]), np.array([[pos]]))
        if injection is not None:
            x = ad.add(x, Tensor(np.asarray(injection).reshape(1, 1, -1)))
        is_state = token == cfg.sent_id
        for i in range(cfg.n_decoder_blocks):
            name = f"dec.{i}"
            k, v = m.project_kv(name + ".self", x)
            cache = self.self_kv[i]
            cache[0].append(k.data[0])
            cache[1].append(v.data[0])
            K = Tensor(np.concatenate(cache[0])[None])
            V = Tensor(np.concatenate(cache[1])[None])
            t = m.ln(name + ".ln1", ad.add(x, m.attend(name + ".self", x, K, V, None)))
            if cfg.stateful:
                sc = self.state_kv[i]
                if is_state:
                    k, v = m.project_kv(name + ".state", t)
                    sc[0].append(k.data[0])
                    sc[1].append(v.data[0])
                if not sc[0]:
                    raise ValueError("decoding must start with <s>")
                K = Tensor(np.concatenate(sc[0])[None])
                V = Tensor(np.concatenate(sc[1])[None])
                t = m.ln(name + ".ln2", ad.add(t, m.attend(name + ".state", t, K, V, None)))
            ck, cv = self.cross_kv[i]
            u = m.ln(name + ".ln3", ad.add(t, m.attend(name + ".cross", t, ck, cv, None)))
            x = m.ln(name + ".ln4", ad.add(u, m.ffn(name, u)))
        self.ids.append(int(token))
        self.hidden.append(x.data[0, 0])
        return m.output_logits(x).data[0, 0]


def full_logits(model: EricModel, memory: Tensor, ids: list[int], injections: dict[int, np.ndarray]) -> np.ndarray:
    """Reference: recompute the whole prefix without caching. [T, V]"""
    model = _frozen(model) if any(t.requires_grad for t in model.params.values()) else model
    T = len(ids)
    dec = np.asarray(ids)[None]
    H0 = model.embed(dec)
    if injections:
        extra = np.zeros((1, T, model.config.d_model))
        for pos, inj in injections.items():
            extra[0, pos] = inj
        H0 = ad.add(H0, Tensor(extra))
    H = model.decoder_forward(H0, memory, dec, np.ones((1, memory.shape[1]), dtype=bool))
    return model.output_logits(H).data[0]


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Result:
    ids: list[int]
    entities: list[int | None]
    states: list[int | None]
    injections: dict[int, np.ndarray]
    truncated: bool = False


def _entity_support(used: set[int], none_class: int) -> np.ndarray:
    allowed = np.zeros(none_class + 1, dtype=bool)
    for i in used:
        allowed[i] = True
    fresh = next((i for i in range(MAX_ENTITIES) if i not in used), None)
    if fresh is not None:
        allowed[fresh] = True
    allowed[none_class] = True
    return allowed


def generate_stage1(model: EricModel, vocab: Vocabulary, input_ids: list[int],
                    gen: GenerationConfig, rng: np.random.Generator) -> Stage1Result:
    """Sample an anonymized narrative sentence by sentence.

    Before each sentence the entity head (over the previous sentence's pooled
    states, or the encoder memory for the first) picks p̂_n; for a real entity
    ê_n is quantized to ŝ_n, and both are added at the ``<s>`` row. Inside a
    sentence ``<pad>``, ``<unk>``, ``<none>`` and ``<s>`` are never sampled;
    after terminal punctuation (or the per-sentence cap) only ``<s>`` or
    ``<eos>`` may follow.
    """
    m = _frozen(model)
    cfg = m.config
    if not cfg.stateful:
        raise ValueError("stage-1 generation needs the entity-state model")
    inp = np.asarray(input_ids or [vocab.pad_id])[None]
    memory = m.encode_input(inp, np.ones(inp.shape, dtype=bool))
    dec = IncrementalDecoder(m, memory)
    max_len = min(gen.max_seq_len, cfg.max_seq_len)
    none_class = MAX_ENTITIES
    terminal = vocab.terminal_ids()
    banned = np.zeros(cfg.vocab_size, dtype=bool)
    banned[[vocab.pad_id, vocab.unk_id, vocab.none_id, vocab.sent_id]] = True
    boundary = np.zeros(cfg.vocab_size, dtype=bool)
    boundary[[vocab.sent_id, vocab.eos_id]] = True

    used: set[int] = set()
    entities: list[int | None] = []
    states: list[int | None] = []
    injections: dict[int, np.ndarray] = {}
    sent_start: list[int] = []
    truncated = False
    next_tok = vocab.sent_id
    while next_tok == vocab.sent_id:
        if dec.length >= max_len:
            truncated = True
            break
        n = len(sent_start)
        start = dec.length
        if n == 0:
            q = memory.data[0].mean(axis=0)
            keys = memory.data[0]
        else:
            s0 = sent_start[-1]
            q = np.mean(dec.hidden[s0:start], axis=0)
            keys = np.stack(dec.hidden[:start])
        probs = _restricted_probs(m.entity_logits(Tensor(q)).data, _entity_support(used, none_class))
        cls = int(np.argmax(probs)) if gen.greedy_entities else top_p_sample(probs, gen.top_p, rng)
        if cls == none_class:
            entities.append(None)
            states.append(None)
            injection = None
        else:
            used.add(cls)
            ent_tok = vocab.placeholder_id(cls)
            e_hat = m.predict_state_representation(Tensor(q), ent_tok, Tensor(keys)).data
            k, s_vec = m.quantize(e_hat)
            entities.append(cls)
            states.append(int(k))
            injection = m._p("tok_emb").data[ent_tok].copy()
            if cfg.state_injection:
                injection = injection + s_vec @ m._p("state_proj.w").data
            injections[start] = injection
        sent_start.append(start)
        logits = dec.step(vocab.sent_id, injection)

        # tokens of this sentence
        next_tok = vocab.eos_id
        n_tok = 0
        while True:
            if dec.length >= max_len:
                truncated = True
                next_tok = vocab.eos_id
                break
            last = dec.ids[-1]
            at_boundary = last in terminal or n_tok >= gen.sentence_token_cap
            allowed = boundary if at_boundary else ~banned
            probs = _restricted_probs(logits, allowed)
            tok = top_p_sample(probs, gen.top_p, rng)
            if tok == vocab.eos_id or tok == vocab.sent_id:
                next_tok = tok
                break
            logits = dec.step(tok)
            n_tok += 1
        if len(sent_start) >= gen.max_sentences:
            break
    if truncated:
        log.warning("generation hit max length %d without <eos>", max_len)
    return Stage1Result(dec.ids + [vocab.eos_id], entities, states, injections, truncated)


# ---------------------------------------------------------------------------
# stage 2


def generate_stage2(model: EricModel, vocab: Vocabulary, input_ids: list[int], anonymized_ids: list[int],
                    gen: GenerationConfig, rng: np.random.Generator) -> list[tuple[int, str]]:
    """Sample ``<eI> mention ...`` pairs conditioned on X ++ Yᵉ and parse them."""
    m = _frozen(model)
    cfg = m.config
    body = [t for t in anonymized_ids if t != vocab.eos_id]
    src = (list(input_ids) + body)[: cfg.max_seq_len] or [vocab.pad_id]
    inp = np.asarray(src)[None]
    memory = m.encode_input(inp, np.ones(inp.shape, dtype=bool))
    dec = IncrementalDecoder(m, memory)
    banned = np.zeros(cfg.vocab_size, dtype=bool)
    banned[[vocab.pad_id, vocab.unk_id, vocab.none_id, vocab.sent_id]] = True
    logits = dec.step(vocab.sent_id)
    out: list[int] = []
    limit = min(gen.max_mention_tokens, cfg.max_seq_len - 1)
    while len(out) < limit:
        tok = top_p_sample(_restricted_probs(logits, ~banned), gen.top_p, rng)
        if tok == vocab.eos_id:
            break
        out.append(tok)
        if len(out) < limit:
            logits = dec.step(tok)
    return parse_mention_pairs(out, vocab)


def align_mentions(anonymized_text: str, pairs: list[tuple[int, str]]) -> list[str | None]:
    """Match generated pairs to placeholder occurrences in order.

    Each occurrence takes the next unused pair for the same placeholder (pairs
    for other placeholders are skipped past, never reordered); occurrences
    without a pair get None so the restore fallbacks apply.
    """
    out: list[str | None] = []
    cursor = 0
    for tok in split_tokens(anonymized_text):
        idx = placeholder_index(tok)
        if idx is None:
            continue
        found = None
        for j in range(cursor, len(pairs)):
            if pairs[j][0] == idx:
                found = pairs[j][1]
                cursor = j + 1
                break
        out.append(found)
    return out


def generate_narrative(input_text: str, state_model: EricModel, mention_model: EricModel | None,
                       vocab: Vocabulary, gen: GenerationConfig, seed: int,
                       name_pool: list[str] | None = None) -> GenerationOutput:
    rng = make_rng(seed, "generate", _text_key(input_text))
    input_ids = vocab.tokenize(input_text)
    s1 = generate_stage1(state_model, vocab, input_ids, gen, rng)
    anonymized = vocab.detokenize(t for t in s1.ids if t not in (vocab.sent_id, vocab.eos_id))
    pairs = [] if mention_model is None else generate_stage2(mention_model, vocab, input_ids, s1.ids, gen, rng)
    mentions = align_mentions(anonymized, pairs)
    pool = list(name_pool) if name_pool else ["Alex"]
    text = restore_mentions(anonymized, mentions, pool, make_rng(seed, "restore", _text_key(input_text)))
    return GenerationOutput(input_text, s1.ids, s1.entities, s1.states, mentions, text, seed, s1.truncated)


def _text_key(text: str) -> int:
    import zlib

    return zlib.crc32(text.encode("utf-8"))


# ---------------------------------------------------------------------------
# scoring


def score_sequence(model: EricModel, batch: Batch, states: np.ndarray | None = None,
                   ent_tok: np.ndarray | None = None) -> np.ndarray:
    """Teacher-forced per-sentence Σ log P(y_t) for tokens after each ``<s>``. [B, N]

    ``states`` ([B, N, D]) and ``ent_tok`` ([B, N]) override what is injected
    at each ``<s>``; by default the gold quantized states are used. Padded
    sentence slots score 0.
    """
    m = _frozen(model)
    if ent_tok is not None:
        batch = _with_entities(batch, ent_tok, m.config)
    tr = m.forward(batch, states=states, compute_losses=False)
    logp = ad.log_softmax_np(tr.logits.data)
    tok = np.take_along_axis(logp, batch.tgt_ids[..., None], axis=-1)[..., 0]
    tok = np.where(batch.tgt_mask, tok, 0.0)
    B, N = batch.sent_start.shape
    out = np.zeros((B, N))
    csum = np.concatenate([np.zeros((B, 1)), np.cumsum(tok, axis=1)], axis=1)
    # sentence tokens start+1..end-1 are predicted at positions start..end-2
    for b, n in zip(*np.nonzero(batch.sent_mask)):
        s, e = batch.sent_start[b, n], batch.sent_end[b, n]
        out[b, n] = csum[b, e - 1] - csum[b, s]
    return out


def _with_entities(batch: Batch, ent_tok: np.ndarray, cfg) -> Batch:
    from dataclasses import replace

    ent_tok = np.asarray(ent_tok, dtype=np.int64)
    if ent_tok.shape != batch.ent_tok.shape:
        raise ValueError("entity overrides must match the batch's sentence slots")
    return replace(batch, ent_tok=ent_tok)


def predict_slot_states(model: EricModel, batch: Batch, states: np.ndarray, n: np.ndarray | int,
                        ) -> tuple[np.ndarray, np.ndarray]:
    """ŝ for slot ``n`` of each example given the states already fed before it.

    Only hidden states strictly before sentence ``n`` enter the computation,
    so ``states`` at slots >= n are irrelevant. Returns ([B, D], [B] index).
    """
    m = model
    B, N = batch.sent_start.shape
    n = np.broadcast_to(np.asarray(n), (B,))
    tr = m.forward(batch, states=states, compute_losses=False)
    ctx, pool, keymask = m._context(batch, tr.memory, tr.H_L)
    rows = np.arange(B)
    q = ad.matmul(Tensor(pool[rows, n][:, None]), ctx)
    ent = batch.ent_tok[rows, n][:, None]
    query = ad.add(q, Tensor(m._p("tok_emb").data[ent]))
    e_hat = m.state_representation(query, ctx, keymask[rows, n][:, None]).data[:, 0]
    k, s = m.quantize(e_hat)
    return s, k


def predicted_states(model: EricModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Model-predicted ŝ_n per slot, fed back sentence by sentence. ([B, N, D], [B, N] index or -1)

    Each ŝ_n comes from a pass whose prefix already carries the earlier
    predicted states, so no gold information about sentence n or later is read.
    """
    m = _frozen(model)
    cfg = m.config
    B, N = batch.sent_start.shape
    states = np.zeros((B, N, cfg.D))
    index = np.full((B, N), -1, dtype=np.int64)
    for n in range(N):
        s, k = predict_slot_states(m, batch, states, n)
        real = batch.sent_mask[:, n] & (batch.ent_tok[:, n] != cfg.none_id)
        states[real, n] = s[real]
        index[real, n] = k[real]
    return states, index


def gold_states(model: EricModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Quantized event representations of the actual sentences. ([B, N, D], [B, N])"""
    m = _frozen(model)
    cfg = m.config
    B, N = batch.sent_start.shape
    states = np.zeros((B, N, cfg.D))
    index = np.full((B, N), -1, dtype=np.int64)
    if len(batch.ent_slots):
        e = m.encode_sentence_event(batch.sent_tok, batch.sent_tok_mask, batch.ph_pos).data
        k, s = m.quantize(e)
        states.reshape(B * N, cfg.D)[batch.ent_slots] = s
        index.reshape(-1)[batch.ent_slots] = k
    return states, index


def random_states(model: EricModel, batch: Batch, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly drawn codebook rows for every entity slot."""
    cfg = model.config
    B, N = batch.sent_start.shape
    cb = model.params["codebook"].data
    k = rng.integers(cfg.K, size=(B, N))
    real = batch.sent_mask & (batch.ent_tok != cfg.none_id)
    states = np.where(real[..., None], cb[k], 0.0)
    return states, np.where(real, k, -1)


def example_batch(examples: list[AnonymizedExample], model: EricModel) -> Batch:
    from .training import collate

    return collate(examples, model.config)


__all__ = [
    "GenerationConfig", "GenerationOutput", "IncrementalDecoder", "nucleus", "top_p_sample",
    "generate_stage1", "generate_stage2", "generate_narrative", "align_mentions", "score_sequence",
    "predicted_states", "predict_slot_states", "gold_states", "random_states", "full_logits", "causal_mask",
]
