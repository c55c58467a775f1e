"""Full model against camera-only and lidar-only models, clean and with
camera cells dropped at evaluation time.

    python3 scripts/robustness.py --seeds 7,8,9,10,11 --val-scenes 20
"""
import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

from dynafuse.config import load_config
from dynafuse.train import robustness_csv, robustness_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", default="7,8,9,10,11")
    ap.add_argument("--val-scenes", type=int, default=20)
    ap.add_argument("--dropout", type=float, default=0.5)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = load_config(args.config)
    base = replace(base, train=replace(base.train, val_scenes=args.val_scenes))
    t0 = time.time()
    rows = robustness_run(base, [int(s) for s in args.seeds.split(",")], args.dropout)
    text = robustness_csv(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "robustness.csv").write_text(text)
    print(text, end="")
    print(f"fused >= both single-modality models: {sum(r.fused_wins for r in rows)}/{len(rows)} seeds")
    print(f"fused degrades less under camera dropout: {sum(r.degrades_less for r in rows)}/{len(rows)} seeds")
    print(f"{time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
