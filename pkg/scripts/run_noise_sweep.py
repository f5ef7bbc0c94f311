#!/usr/bin/env python3
"""Noise-robustness experiment: train full and basic models across channel
noise rates and compare SumR degradation (acceptance criterion scale).

Writes cells, metrics and an aggregate manifest under --out.
"""

import argparse
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
    parser.add_argument("--out", default="runs/noise_sweep")
    parser.add_argument("--rhos", default="0.2,0.5")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--config", default=None,
                        help="config file; a desk-scale default is generated if omitted")
    parser.add_argument("--compound", action="store_true")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config is None:
        config = out / "experiment.cfg"
        config.write_text(DEFAULT_CONFIG)
    else:
        config = Path(args.config)
    argv = ["sweep-noise", "--config", str(config), "--rhos", args.rhos,
            "--seeds", args.seeds, "--out", str(out)]
    if args.compound:
        argv.append("--compound")
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
