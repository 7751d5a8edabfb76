"""Run the seeded end-to-end experiment and print a per-level summary.

    python3 scripts/run_suite.py [--config cfg.json] [--out results/]
"""

import argparse
import json

from posesearch.harness.config import Config
from posesearch.harness.experiment import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = Config.load(args.config) if args.config else Config()
    report = run_experiment(cfg, args.out)
    for level, v in report["levels"].items():
        ref, init = v["refined"]["overall"], v["initial"]["overall"]
        print(
            f"{level}: top1 {ref['top1']:.2f} (initial {init['top1']:.2f})  top5 {ref['top5']:.2f}  "
            f"cls {ref['cls_top1']:.2f}  acc_pi/18 {ref['acc_pi_18']:.2f}  med_err {ref['med_err']:.2f} deg"
        )
    print(json.dumps(report["timing"], indent=2))


if __name__ == "__main__":
    main()
