"""Run every CLI stage on a tiny configuration in a scratch directory.

    python3 scripts/smoke_pipeline.py --work-dir runs/smoke
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from eric.cli import main as cli

TINY = ["synth.n_train=40", "synth.n_test=6", "model.d_model=16", "model.n_heads=2", "model.d_ff=16",
        "model.K=8", "model.D=8", "model.n_decoder_blocks=1", "model.max_seq_len=160",
        "train.batch_size=4", "train.max_steps=20", "train.checkpoint_every=10",
        "stage2_train.max_steps=10", "generation.max_seq_len=80", "generation.max_mention_tokens=16"]

STAGES = [["synth"], ["preprocess"], ["train", "--stage", "1"], ["train", "--stage", "2"],
          ["generate"], ["evaluate"], ["probe", "--mode", "predicted"], ["diagnose"]]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work-dir", default="runs/smoke")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    common = ["--work-dir", args.work_dir, "--seed", str(args.seed)] + [x for s in TINY for x in ("--set", s)]
    for stage in STAGES:
        t0 = time.time()
        code = cli(stage + common)
        print(f"# {' '.join(stage)}: exit {code} ({time.time() - t0:.1f}s)", file=sys.stderr)
        if code:
            return code
    metrics = json.loads((Path(args.work_dir) / "metrics.json").read_text())
    print(json.dumps({k: round(v, 4) for k, v in metrics.items()}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
