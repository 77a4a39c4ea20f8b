"""Batching, Adam, and the deterministic training loop for both stages."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import load_model, save_model
from .model import Batch, EricModel, ModelConfig
from .rng import make_rng
from .text import AnonymizedExample, build_stage2_target

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 12
    learning_rate: float = 1e-4
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 500
    max_seq_len: int = 512
    stage: str = "state_model"  # or "mention_model"
    grad_clip: float = 1.0
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.stage not in ("state_model", "mention_model"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.max_steps < 0 or self.checkpoint_every < 1:
            raise ValueError("max_steps must be >= 0 and checkpoint_every >= 1")


# ---------------------------------------------------------------------------
# batching


def fit_to_length(ex: AnonymizedExample, max_len: int, eos_id: int) -> AnonymizedExample:
    """Drop trailing sentences until the decoder input fits ``max_len``."""
    if len(ex.output_ids) - 1 <= max_len:
        return ex
    keep = len(ex.sentence_spans)
    while keep > 1 and ex.sentence_spans[keep - 1][1] > max_len:
        keep -= 1
    end = min(ex.sentence_spans[keep - 1][1], max_len)
    spans = list(ex.sentence_spans[:keep])
    spans[-1] = (spans[-1][0], end)
    log.warning("example of length %d truncated to %d sentences", len(ex.output_ids), keep)
    return replace(
        ex,
        input_ids=ex.input_ids[:max_len],
        output_ids=ex.output_ids[:end] + [eos_id],
        sentence_spans=spans,
        mentioned_entity=ex.mentioned_entity[:keep],
        gold_states=None if ex.gold_states is None else ex.gold_states[:keep],
    )


def collate(examples: Sequence[AnonymizedExample], cfg: ModelConfig) -> Batch:
    examples = [fit_to_length(ex, cfg.max_seq_len, cfg.eos_id) for ex in examples]
    if any(len(ex.input_ids) > cfg.max_seq_len for ex in examples):
        log.warning("input longer than %d tokens truncated", cfg.max_seq_len)
        examples = [replace(ex, input_ids=ex.input_ids[: cfg.max_seq_len]) for ex in examples]
    B = len(examples)
    M = max(1, max(len(ex.input_ids) for ex in examples))
    T = max(len(ex.output_ids) - 1 for ex in examples)
    N = max(len(ex.sentence_spans) for ex in examples)
    inp = np.full((B, M), cfg.pad_id, dtype=np.int64)
    inp_mask = np.zeros((B, M), dtype=bool)
    dec = np.full((B, T), cfg.pad_id, dtype=np.int64)
    tgt = np.full((B, T), cfg.pad_id, dtype=np.int64)
    tgt_mask = np.zeros((B, T), dtype=bool)
    start = np.zeros((B, N), dtype=np.int64)
    end = np.zeros((B, N), dtype=np.int64)
    smask = np.zeros((B, N), dtype=bool)
    ent_tok = np.full((B, N), cfg.none_id, dtype=np.int64)
    ent_cls = np.full((B, N), 100, dtype=np.int64)
    slots, sents, ph = [], [], []
    for b, ex in enumerate(examples):
        ids = ex.input_ids or [cfg.pad_id]
        inp[b, : len(ids)] = ids
        inp_mask[b, : len(ids)] = True
        out = ex.output_ids
        dec[b, : len(out) - 1] = out[:-1]
        tgt[b, : len(out) - 1] = out[1:]
        tgt_mask[b, : len(out) - 1] = True
        for n, ((s, e), p) in enumerate(zip(ex.sentence_spans, ex.mentioned_entity)):
            start[b, n], end[b, n], smask[b, n] = s, e, True
            ent_tok[b, n] = p
            if p != cfg.none_id:
                ent_cls[b, n] = p - cfg.placeholder_offset
                sent = out[s:e]
                slots.append(b * N + n)
                sents.append(sent)
                ph.append(sent.index(p))
    L = max((len(s) for s in sents), default=1)
    sent_tok = np.full((len(sents), L), cfg.pad_id, dtype=np.int64)
    sent_tok_mask = np.zeros((len(sents), L), dtype=bool)
    for i, s in enumerate(sents):
        sent_tok[i, : len(s)] = s
        sent_tok_mask[i, : len(s)] = True
    gold = [ex.gold_states for ex in examples] if all(ex.gold_states is not None for ex in examples) else None
    return Batch(inp, inp_mask, dec, tgt, tgt_mask, start, end, smask, ent_tok, ent_cls,
                 np.asarray(slots, dtype=np.int64), sent_tok, sent_tok_mask,
                 np.asarray(ph, dtype=np.int64), gold)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return make_rng(seed, "batches", epoch).permutation(n)


def make_batches(examples: Sequence[AnonymizedExample], batch_size: int, seed: int,
                 epoch: int = 0) -> Iterator[list[AnonymizedExample]]:
    """Seeded shuffle for ``epoch``, cut into batches (the last may be short)."""
    if not examples:
        raise ValueError("empty dataset")
    order = epoch_order(len(examples), seed, epoch)
    for i in range(0, len(order), batch_size):
        yield [examples[j] for j in order[i: i + batch_size]]


def batch_for_step(examples: Sequence[AnonymizedExample], batch_size: int, seed: int,
                   step: int) -> list[AnonymizedExample]:
    """The examples of global ``step`` (0-based) so resumed runs see the same stream."""
    per_epoch = math.ceil(len(examples) / batch_size)
    epoch, i = divmod(step, per_epoch)
    order = epoch_order(len(examples), seed, epoch)
    return [examples[j] for j in order[i * batch_size: (i + 1) * batch_size]]


def stage2_example(ex: AnonymizedExample, vocab) -> AnonymizedExample:
    """Recast an example for the mention model: X ++ Yᵉ in, placeholder/mention pairs out."""
    body = [t for t in ex.output_ids if t != vocab.eos_id]
    out = [vocab.sent_id] + build_stage2_target(ex, vocab)
    return AnonymizedExample(
        input_ids=list(ex.input_ids) + body,
        output_ids=out,
        sentence_spans=[(0, len(out) - 1)],
        mentioned_entity=[vocab.none_id],
        mention_sequence=list(ex.mention_sequence),
    )


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, params: dict[str, ad.Tensor], grad_clip: float | None = None) -> float:
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = 1.0
        if grad_clip is not None and norm > grad_clip:
            scale = grad_clip / norm
        self.step_count += 1
        b1, b2, t = self.beta1, self.beta2, self.step_count
        for k, p in params.items():
            g = grads[k] * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**t)
            v_hat = self.v[k] / (1 - b2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.m:
            self.m[k] = tensors[f"adam.m.{k}"].copy()
            self.v[k] = tensors[f"adam.v.{k}"].copy()
        self.step_count = step_count


def train_step(model: EricModel, batch: Batch, opt: Adam, grad_clip: float | None = 1.0) -> dict[str, float]:
    """Forward, backward, Adam update, constraint projection. Returns the loss components."""
    model.zero_grad()
    trace = model.forward(batch)
    losses = trace.losses()
    if not all(math.isfinite(v) for v in losses.values()):
        raise NonFiniteLoss(f"non-finite loss {losses}")
    ad.backward(trace.total)
    model.params["tok_emb"].grad[model.config.none_id] = 0.0
    losses["grad_norm"] = opt.step(model.params, grad_clip)
    model.enforce_constraints()
    return losses


# ---------------------------------------------------------------------------
# loop


def _dump_batch(path: Path, examples: Sequence[AnonymizedExample], err: Exception) -> None:
    path.write_text(json.dumps({"error": str(err), "examples": [ex.to_json() for ex in examples]}) + "\n")


def prepare_examples(examples: Sequence[AnonymizedExample], cfg: ModelConfig, stage: str,
                     vocab=None) -> list[AnonymizedExample]:
    if stage == "state_model":
        return list(examples)
    if vocab is None:
        raise ValueError("the mention stage needs the vocabulary to tokenize surfaces")
    return [stage2_example(ex, vocab) for ex in examples]


def train_loop(train_cfg: TrainConfig, model_cfg: ModelConfig, examples: Sequence[AnonymizedExample],
               out_dir: str | Path, vocab=None, resume: bool = True) -> EricModel:
    """Train one stage, writing ``loss_log.jsonl`` and checkpoints into ``out_dir``.

    With ``resume`` and an existing ``latest.ckpt``, training continues from
    its step with the same batch stream, so the result matches an
    uninterrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_examples(examples, model_cfg, train_cfg.stage, vocab)
    if not data:
        raise ValueError("no training examples")
    latest = out_dir / "latest.ckpt"
    log_path = out_dir / "loss_log.jsonl"
    start = 0
    if resume and latest.exists():
        model, meta, extra = load_model(latest, expected=model_cfg)
        start = int(meta["train.step"])
        opt = Adam(model.params, train_cfg.learning_rate)
        opt.load_state(extra, start)
        log.info("resumed from %s at step %d", latest, start)
        _truncate_log(log_path, start)
    else:
        model = EricModel(model_cfg, seed=train_cfg.seed)
        opt = Adam(model.params, train_cfg.learning_rate)
        log_path.write_text("")

    with open(log_path, "a", encoding="utf-8") as log_f:
        for step in range(start, train_cfg.max_steps):
            exs = batch_for_step(data, train_cfg.batch_size, train_cfg.seed, step)
            batch = collate(exs, model_cfg)
            try:
                losses = train_step(model, batch, opt, train_cfg.grad_clip)
            except NonFiniteLoss as err:
                _dump_batch(out_dir / f"nonfinite_step{step + 1}.json", exs, err)
                raise
            row = {"step": step + 1, **{k: losses[k] for k in ("lm", "ent", "cl", "total")}}
            if (step + 1) % train_cfg.log_every == 0 or step + 1 == train_cfg.max_steps:
                log_f.write(json.dumps(row) + "\n")
                log_f.flush()
            if (step + 1) % train_cfg.checkpoint_every == 0 or step + 1 == train_cfg.max_steps:
                save_training_checkpoint(latest, model, opt, train_cfg, step + 1)
    if train_cfg.max_steps == 0 or start >= train_cfg.max_steps:
        save_training_checkpoint(latest, model, opt, train_cfg, max(start, train_cfg.max_steps))
    return model


def save_training_checkpoint(path: Path, model: EricModel, opt: Adam, cfg: TrainConfig, step: int) -> None:
    save_model(path, model, extra_meta={"train.step": step, "train.config": asdict(cfg)},
               extra_tensors=opt.state_tensors())


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    rows = [line for line in path.read_text().splitlines() if line.strip() and json.loads(line)["step"] <= step]
    path.write_text("".join(r + "\n" for r in rows))


def read_loss_log(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
