"""Run one or more ablation tables over several seeds and print per-seed
scores as they arrive.

    python3 scripts/run_ablation.py --tables IVa,IVh --seeds 7,8,9,10,11 --out results/
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from dynafuse.config import load_config
from dynafuse.train import AblationTable, ablation_rows, train_loop


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--tables", default="IVa")
    ap.add_argument("--seeds", default="7,8,9,10,11")
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    base = load_config(args.config)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for table in args.tables.split(","):
        rows = ablation_rows(base, table)
        scores = []
        t0 = time.time()
        for desc, cfg in rows:
            row = []
            for s in seeds:
                t = time.time()
                row.append(train_loop(replace(cfg, train=replace(cfg.train, seed=s))).eval.mAP)
                print(f"{table} {desc} seed={s} mAP={row[-1]:.4f} ({time.time() - t:.0f}s)", flush=True)
            scores.append(row)
            print(f"{table} {desc} mean={np.mean(row):.4f}", flush=True)
        res = AblationTable(table, [d for d, _ in rows], seeds, scores)
        (out / f"ablation_{table}.csv").write_text(res.to_csv())
        print(res.to_csv(), end="")
        print(f"{table}: {time.time() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
