"""Desk-scale accuracy table over several evaluation seeds.

    python scripts/run_desk_table.py --config configs/desk.ini --seeds 0 1 2 --out runs/desk
"""
import argparse
import logging
import time
from pathlib import Path

from sslpurify.config import load_config, parse_config
from sslpurify.multiseed import mean_accuracy, run_seeds, summary


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--model-dir", type=Path)
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    overrides = dict(s.split("=", 1) for s in args.set)
    cfg = load_config(args.config, overrides) if args.config else parse_config("", overrides)
    t0 = time.perf_counter()
    reports = run_seeds(cfg, args.seeds, args.out, args.model_dir)
    print(summary(reports))
    modes = next(iter(reports.values())).modes
    if {"none", "ssl", "mtl"} <= set(modes):
        clean = {m: mean_accuracy(reports, m, "clean") for m in modes}
        print("attacked mtl >= none per seed:",
              all(r.accuracy("mtl", "attacked") >= r.accuracy("none", "attacked") for r in reports.values()))
        print("clean none >= mtl >= ssl (seed mean):", clean["none"] >= clean["mtl"] >= clean["ssl"])
    print(f"wall clock {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
