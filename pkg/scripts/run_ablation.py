#!/usr/bin/env python3
"""Component ablation: train the six-row grid (triplet-only through the full
objective) on one corpus and tabulate mean SumR per row.
"""

import argparse
import json
import sys
from pathlib import Path

from nrccr.cli import main as cli_main

DEFAULT_CONFIG = """\
# default synthetic world; desk-scale optimization settings
lr = 1e-3
epochs = 30
early_stop_patience = 8
"""


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--rho", type=float, default=0.4)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--config", default=None)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config is None:
        config = out / "experiment.cfg"
        config.write_text(DEFAULT_CONFIG)
    else:
        config = Path(args.config)
    corpus = out / "corpus"
    code = cli_main(["gen-corpus", "--config", str(config), "--out", str(corpus),
                     "--rho", str(args.rho), "--seed", "0"])
    if code:
        return code
    code = cli_main(["ablate", "--corpus", str(corpus), "--config", str(config),
                     "--out", str(out), "--seeds", args.seeds])
    if code:
        return code
    manifest = json.loads((out / "experiment.json").read_text())
    print("\nmean SumR per row:")
    for row, mean in manifest["aggregates"]["mean_sumr"].items():
        print(f"  {row:14s} {mean:7.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
