#!/usr/bin/env python3
"""End-to-end smoke run on a small world: generate, train, evaluate, dump."""

import json
import sys
from pathlib import Path

from nrccr.cli import main as cli_main

CONFIG = """\
vocab_size = 80
concepts = 10
frames_per_video = 4
frame_dim = 16
captions_per_video = 2
train_videos = 60
val_videos = 20
test_videos = 20
rho = 0.3

lr = 1e-3
batch_size = 16
epochs = 8
token_dim = 16
common_dim = 8
early_stop_patience = 8
"""


def main() -> int:
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
    out.mkdir(parents=True, exist_ok=True)
    config = out / "demo.cfg"
    config.write_text(CONFIG)
    steps = [
        ["gen-corpus", "--config", str(config), "--out", str(out / "corpus"),
         "--seed", "0"],
        ["train", "--corpus", str(out / "corpus"), "--config", str(config),
         "--out", str(out / "run"), "--seed", "0"],
        ["eval", "--corpus", str(out / "corpus"), "--checkpoint",
         str(out / "run" / "best.ckpt"), "--out", str(out / "metrics.json"),
         "--t2t", "--group-by-length"],
        ["dump-embeddings", "--corpus", str(out / "corpus"), "--checkpoint",
         str(out / "run" / "best.ckpt"), "--out", str(out / "embeddings.tsv"),
         "--sample", "5", "--seed", "0"],
    ]
    for argv in steps:
        code = cli_main(argv)
        if code:
            return code
    print(json.dumps(json.loads((out / "metrics.json").read_text()), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
