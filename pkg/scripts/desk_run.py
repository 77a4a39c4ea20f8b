"""Train the entity-state model and its no-state ablation on a synthetic world
and print the desk-scale checks.

    python3 scripts/desk_run.py --out runs/desk --steps 3000
"""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import fields

from eric.experiments import DeskConfig, desk_checks, run_desk


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    for f in fields(DeskConfig):
        if f.name == "ablation_steps":
            ap.add_argument("--ablation-steps", type=int)
            continue
        ap.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    cfg = DeskConfig(**{f.name: getattr(args, f.name) for f in fields(DeskConfig)})
    res = run_desk(cfg, args.out)
    summary = {k: res[k] for k in ("loss", "mention_control", "diagnostics", "probe", "seconds")}
    print(json.dumps(summary, indent=2, sort_keys=True))
    for name, ok in desk_checks(res).items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")


if __name__ == "__main__":
    main()
