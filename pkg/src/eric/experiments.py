"""Desk-scale experiment: train the state model and its no-state ablation on a
synthetic world, then measure loss reduction, mention control, codebook use,
cluster purity and the perturbation probe."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .inference import GenerationConfig, generate_stage1
from .model import ModelConfig
from .probe import (accuracy_csv, mean_accuracy, mention_control, paired_sign_test, perturb_and_score,
                    state_diagnostics)
from .rng import make_rng
from .synthetic import WORLDS, generate_synthetic_records
from .text import Vocabulary, preprocess_corpus, vocabulary_texts
from .training import TrainConfig, read_loss_log, train_loop

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    world: str = "four_state"
    n_train: int = 2000
    n_test: int = 200
    seed: int = 0
    steps: int = 3000
    ablation_steps: int | None = None   # defaults to ``steps``
    batch_size: int = 12
    learning_rate: float = 1e-3
    d_model: int = 64
    n_heads: int = 4
    n_decoder_blocks: int = 2
    n_encoder_blocks: int = 1
    d_ff: int = 128
    K: int = 64
    D: int = 32
    max_seq_len: int = 256
    n_generate: int = 200
    loss_window: int = 50


def _model_config(cfg: DeskConfig, vocab_size: int, ablation: bool) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d_model=cfg.d_model, n_heads=cfg.n_heads,
                       n_decoder_blocks=cfg.n_decoder_blocks, n_encoder_blocks=cfg.n_encoder_blocks,
                       d_ff=cfg.d_ff, K=cfg.K, D=cfg.D, max_seq_len=cfg.max_seq_len,
                       state_injection=not ablation, lambda2=0.0 if ablation else 1.0)


def loss_reduction(rows: list[dict], window: int) -> dict:
    """Relative drop of the total loss from step 10 to the mean of the last ``window`` steps."""
    by_step = {r["step"]: r["total"] for r in rows}
    start = by_step[10]
    tail = [r["total"] for r in rows[-window:]]
    end = float(np.mean(tail))
    return {"step10": start, "final_mean": end, "final": rows[-1]["total"],
            "reduction": 1.0 - end / start}


def run_desk(cfg: DeskConfig, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    world = WORLDS[cfg.world](seed=cfg.seed)
    records = generate_synthetic_records(world, cfg.n_train + cfg.n_test)
    train_rec, test_rec = records[: cfg.n_train], records[cfg.n_train:]
    vocab = Vocabulary.build(vocabulary_texts(train_rec))
    train, _ = preprocess_corpus(train_rec, vocab, cfg.seed)
    test, _ = preprocess_corpus(test_rec, vocab, cfg.seed + 1)
    vocab.save(out / "vocab.json")

    models = {}
    timings = {}
    for name, ablation in (("full", False), ("ablation", True)):
        steps = cfg.steps if not ablation or cfg.ablation_steps is None else cfg.ablation_steps
        tcfg = TrainConfig(batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, max_steps=steps,
                           seed=cfg.seed, checkpoint_every=max(steps, 1), log_every=1,
                           max_seq_len=cfg.max_seq_len)
        t = time.time()
        models[name] = train_loop(tcfg, _model_config(cfg, len(vocab), ablation), train, out / name,
                                  vocab=vocab, resume=False)
        timings[f"train_{name}"] = time.time() - t
    full, abl = models["full"], models["ablation"]

    res: dict = {"config": asdict(cfg), "n_train": len(train), "n_test": len(test)}
    res["loss"] = loss_reduction(read_loss_log(out / "full" / "loss_log.jsonl"), cfg.loss_window)
    res["loss_ablation"] = loss_reduction(read_loss_log(out / "ablation" / "loss_log.jsonl"), cfg.loss_window)

    t = time.time()
    gen = GenerationConfig(top_p=full.config.top_p, max_seq_len=cfg.max_seq_len)
    rng = make_rng(cfg.seed, "desk_generate")
    outputs = []
    for ex in test[: cfg.n_generate]:
        r = generate_stage1(full, vocab, ex.input_ids, gen, rng)
        outputs.append((r.ids, r.entities))
    res["mention_control"] = mention_control(outputs, vocab)
    timings["generate"] = time.time() - t

    diag = state_diagnostics(full, test, world.n_latent_states)
    res["diagnostics"] = diag.to_dict()

    t = time.time()
    probes = {
        "full_predicted": perturb_and_score(full, test, vocab, "predicted", cfg.seed),
        "full_random": perturb_and_score(full, test, vocab, "random", cfg.seed),
        "ablation": perturb_and_score(abl, test, vocab, "predicted", cfg.seed),
    }
    timings["probe"] = time.time() - t
    res["probe"] = {k: {"mean_accuracy": mean_accuracy(v), "pairs": len(v)} for k, v in probes.items()}
    for k, v in probes.items():
        (out / f"probe_{k}.csv").write_text(accuracy_csv(v))
    res["probe"]["full_vs_ablation"] = paired_sign_test(probes["full_predicted"], probes["ablation"])
    res["probe"]["predicted_vs_random"] = paired_sign_test(probes["full_predicted"], probes["full_random"])
    timings["total"] = time.time() - t0
    res["seconds"] = timings
    (out / "desk_results.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    return res


def desk_checks(res: dict) -> dict[str, bool]:
    """Pass/fail of each desk-scale target."""
    d = res["diagnostics"]
    p = res["probe"]
    return {
        "loss_down_30pct": res["loss"]["reduction"] >= 0.30,
        "mention_control_90pct": res["mention_control"]["accuracy"] >= 0.90,
        "utilization_25pct": d["utilization"] >= 0.25 * d["K"],
        "purity_2x_chance": d["purity"] is not None and d["purity"] >= 2 * d["chance_purity"],
        "probe_full_beats_ablation": (p["full_predicted"]["mean_accuracy"] > p["ablation"]["mean_accuracy"]
                                      and p["full_vs_ablation"]["p_value"] < 0.05),
        "probe_random_below_predicted": p["full_random"]["mean_accuracy"] < p["full_predicted"]["mean_accuracy"],
        "under_30_minutes": res["seconds"]["total"] < 1800,
    }
