"""Command-line pipeline: synth, preprocess, train, generate, evaluate, probe, diagnose.

All artifacts live under the run's ``work_dir``::

    corpus.jsonl            raw records (synth)
    train.jsonl test.jsonl  preprocessed examples (preprocess)
    test_records.jsonl      raw test records, the references
    vocab.json
    stage1/ stage2/         latest.ckpt + loss_log.jsonl (train)
    generated.jsonl         (generate)
    metrics.json metrics.txt
    probe_<mode>.csv  probe_<mode>.json
    diagnostics.json
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("eric")


def _setup_logging() -> None:
    level = os.environ.get("ERIC_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ValueError(f"ERIC_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _examples(path: Path):
    from .text import AnonymizedExample, read_jsonl

    return [AnonymizedExample.from_json(r) for r in read_jsonl(_require(path, "examples file"))]


def _vocab(cfg):
    from .text import Vocabulary

    return Vocabulary.load(_require(cfg.path("vocab.json"), "vocabulary (run preprocess first)"))


def _load_stage(cfg, vocab, stage: int):
    from .checkpoint import load_model

    ckpt = _require(cfg.path(f"stage{stage}") / "latest.ckpt", f"stage-{stage} checkpoint")
    model, _, _ = load_model(ckpt, expected=cfg.model_config(len(vocab), stage))
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, args) -> dict:
    from .synthetic import WORLDS, generate_synthetic_records
    from .text import write_jsonl

    world = WORLDS[cfg.synth["world"]](seed=cfg.seed)
    n = cfg.synth["n_train"] + cfg.synth["n_test"]
    records = generate_synthetic_records(world, n)
    out = Path(args.out) if args.out else cfg.path("corpus.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, records)
    return {"corpus": str(out), "records": len(records)}


def cmd_preprocess(cfg, args) -> dict:
    from .text import Vocabulary, preprocess_records, read_jsonl, vocabulary_texts, write_jsonl

    corpus = Path(args.corpus) if args.corpus else cfg.path("corpus.jsonl")
    records = read_jsonl(_require(corpus, "corpus"))
    n_test = cfg.synth["n_test"]
    if len(records) <= n_test:
        raise ValueError(f"corpus has {len(records)} records, need more than n_test={n_test}")
    train_rec, test_rec = records[:-n_test], records[-n_test:]
    vocab = Vocabulary.build(vocabulary_texts(train_rec))
    train = [ex for _, ex in preprocess_records(train_rec, vocab, cfg.seed)]
    test = [(ex, test_rec[i]) for i, ex in preprocess_records(test_rec, vocab, cfg.seed + 1)]
    cfg.path("").mkdir(parents=True, exist_ok=True)
    vocab.save(cfg.path("vocab.json"))
    write_jsonl(cfg.path("train.jsonl"), [ex.to_json() for ex in train])
    write_jsonl(cfg.path("test.jsonl"), [ex.to_json() for ex, _ in test])
    write_jsonl(cfg.path("test_records.jsonl"), [r for _, r in test])
    return {"train": len(train), "test": len(test), "vocab": len(vocab),
            "filtered": len(records) - len(train) - len(test)}


def cmd_train(cfg, args) -> dict:
    from .training import read_loss_log, train_loop

    stage = args.stage
    vocab = _vocab(cfg)
    train = _examples(cfg.path("train.jsonl"))
    model_cfg = cfg.model_config(len(vocab), stage)
    train_cfg = cfg.train_config(stage)
    out = cfg.path(f"stage{stage}")
    train_loop(train_cfg, model_cfg, train, out, vocab=vocab, resume=not args.fresh)
    rows = read_loss_log(out / "loss_log.jsonl")
    return {"stage": stage, "steps": train_cfg.max_steps, "checkpoint": str(out / "latest.ckpt"),
            "final_loss": rows[-1]["total"] if rows else None}


def cmd_generate(cfg, args) -> dict:
    from .inference import generate_narrative
    from .text import read_jsonl, write_jsonl

    vocab = _vocab(cfg)
    state_model = _load_stage(cfg, vocab, 1)
    stage2 = cfg.path("stage2") / "latest.ckpt"
    mention_model = _load_stage(cfg, vocab, 2) if stage2.exists() else None
    records = read_jsonl(_require(cfg.path("test_records.jsonl"), "test records"))
    if args.n is not None:
        records = records[: args.n]
    names = sorted({e["surface"] for r in read_jsonl(_require(cfg.path("corpus.jsonl"), "corpus"))
                    for e in r.get("entities", [])})
    gen = cfg.generation_config()
    rows = []
    for r in records:
        out = generate_narrative(r["input"], state_model, mention_model, vocab, gen, cfg.seed, names)
        rows.append(out.to_json(vocab))
    path = Path(args.out) if args.out else cfg.path("generated.jsonl")
    write_jsonl(path, rows)
    return {"generated": len(rows), "output": str(path), "mention_model": mention_model is not None}


def cmd_evaluate(cfg, args) -> dict:
    from .metrics import evaluate_corpus
    from .text import read_jsonl, split_tokens

    gen_path = Path(args.generated) if args.generated else cfg.path("generated.jsonl")
    ref_path = Path(args.references) if args.references else cfg.path("test_records.jsonl")
    gen = read_jsonl(_require(gen_path, "generated file"))
    refs = read_jsonl(_require(ref_path, "reference file"))
    if len(refs) < len(gen):
        raise ValueError("fewer references than generated texts")
    gen_field = "text" if gen and "text" in gen[0] else "output"
    report = evaluate_corpus([split_tokens(g[gen_field]) for g in gen],
                             [split_tokens(r["output"]) for r in refs[: len(gen)]])
    cfg.path("").mkdir(parents=True, exist_ok=True)
    cfg.path("metrics.json").write_text(report.to_json() + "\n")
    cfg.path("metrics.txt").write_text(report.to_table())
    sys.stdout.write(report.to_table())
    return report.to_dict()


def cmd_probe(cfg, args) -> dict:
    from .probe import accuracy_csv, mean_accuracy, perturb_and_score

    vocab = _vocab(cfg)
    model = _load_stage(cfg, vocab, 1)
    test = _examples(cfg.path("test.jsonl"))
    if args.n is not None:
        test = test[: args.n]
    records = perturb_and_score(model, test, vocab, mode=args.mode, seed=cfg.seed)
    cfg.path(f"probe_{args.mode}.csv").write_text(accuracy_csv(records))
    summary = {"mode": args.mode, "pairs": len(records), "mean_accuracy": mean_accuracy(records)}
    cfg.path(f"probe_{args.mode}.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def cmd_diagnose(cfg, args) -> dict:
    from .probe import state_diagnostics
    from .synthetic import WORLDS

    vocab = _vocab(cfg)
    model = _load_stage(cfg, vocab, 1)
    test = _examples(cfg.path("test.jsonl"))
    n_states = WORLDS[cfg.synth["world"]](seed=cfg.seed).n_latent_states
    diag = state_diagnostics(model, test, n_states).to_dict()
    cfg.path("diagnostics.json").write_text(json.dumps(diag, sort_keys=True, indent=2) + "\n")
    return diag


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "generate": cmd_generate,
    "evaluate": cmd_evaluate, "probe": cmd_probe, "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--work-dir", help="artifact directory (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.max_steps=50 (repeatable)")

    p = argparse.ArgumentParser(prog="eric", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--out")
    s = sub.add_parser("preprocess", parents=[common], help="anonymize, split and build the vocabulary")
    s.add_argument("--corpus")
    s = sub.add_parser("train", parents=[common], help="train one stage")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    s = sub.add_parser("generate", parents=[common], help="generate narratives for held-out inputs")
    s.add_argument("--n", type=int)
    s.add_argument("--out")
    s = sub.add_parser("evaluate", parents=[common], help="metric report of generated vs reference")
    s.add_argument("--generated")
    s.add_argument("--references")
    s = sub.add_parser("probe", parents=[common], help="entity-coherence perturbation probe")
    s.add_argument("--mode", choices=("gold", "predicted", "random"), default="predicted")
    s.add_argument("--n", type=int, help="only the first n test examples")
    sub.add_parser("diagnose", parents=[common], help="codebook utilization and purity")
    return p


def main(argv: list[str] | None = None) -> int:
    from .config import RunConfig

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        overrides = list(args.set)
        if getattr(args, "max_steps", None) is not None:
            key = "train" if args.stage == 1 else "stage2_train"
            overrides.append(f"{key}.max_steps={args.max_steps}")
        cfg = RunConfig.load(args.config, overrides, seed=args.seed, work_dir=args.work_dir)
        result = COMMANDS[args.command](cfg, args)
    except Exception as err:  # one parseable line, no traceback
        log.debug("command failed", exc_info=True)
        msg = json.dumps({"error": type(err).__name__, "message": str(err), "command": args.command})
        sys.stderr.write(msg + "\n")
        return 1
    if args.command != "evaluate":
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
