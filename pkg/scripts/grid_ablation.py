"""Initial-search Top-1 on unoccluded queries for several grid sizes."""

import argparse
import math

from posesearch.harness.config import Config
from posesearch.harness.experiment import build_queries, build_suite, initial_only

GRIDS = ((2, 6, 2), (3, 9, 3), (4, 12, 4), (5, 16, 5))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    args = ap.parse_args()
    cfg = Config.load(args.config) if args.config else Config()
    banks = build_suite(cfg)
    recs = build_queries(banks, cfg, ["L0"])["L0"]
    for dims in GRIDS:
        ranked = initial_only(recs, banks, cfg, cfg.grid(*dims))
        top1 = sum(r[0].shape_id == q.gt_shape_id for r, q in zip(ranked, recs)) / len(recs)
        print(f"grid {dims} ({math.prod(dims)} poses): top1 {top1:.2f}")


if __name__ == "__main__":
    main()
