"""Run the five-seed synthetic benchmark with ablations and print the comparison table.

    python scripts/run_benchmark.py --out runs/bench
    python scripts/run_benchmark.py --out runs/quick --seeds 0 --variants random-policy --set ppo.epochs=4
"""
import argparse
import json
import logging
import time
from pathlib import Path

import torch

from patchzoom.config import load_config
from patchzoom.experiment import VARIANTS, comparison_table, compressibility_records, plot_series, run_seed, write_json
from patchzoom.metrics import write_records

DEFAULT_VARIANTS = ("random-policy", "random-sampling", "global-update", "local-update", "terminal-reward")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seeds", type=int, nargs="+")
    ap.add_argument("--variants", nargs="*", default=list(DEFAULT_VARIANTS), choices=VARIANTS)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_default_dtype(torch.float64)

    cfg = load_config(args.config, args.set)
    seeds = args.seeds if args.seeds is not None else list(cfg.seeds)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(cfg.to_text())

    t0 = time.perf_counter()
    records, timings = compressibility_records(cfg), {}
    for seed in seeds:
        result = run_seed(cfg, seed, args.variants)
        records += result.records()
        timings[seed] = result.timings
        write_records(records, args.out / "metrics.tsv")
    table = comparison_table(records)
    (args.out / "comparison.tsv").write_text(table)
    write_json(plot_series(records), args.out / "series.json")
    write_json(timings, args.out / "timings.json")
    print(table)
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
