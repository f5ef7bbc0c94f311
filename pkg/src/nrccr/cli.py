"""Command-line orchestration.

Subcommands: gen-corpus, train, eval, sweep-noise, ablate, dump-embeddings.
Exit codes: 0 success, 2 usage/config/format errors, 3 numeric failure.
Every command is deterministic given its seeds and writes only under its
``--out`` path.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import retrieval, trainer
from .config import env_seed_default, load_experiment_config
from .errors import (CheckpointFormatError, ConfigError, CorpusFormatError,
                     TrainingDivergenceError)

# Table-5-style ablation rows: which loss components each row enables
ABLATION_ROWS = (
    ("basic", (False, False, False, False)),
    ("sim", (True, False, False, False)),
    ("feat", (False, True, False, False)),
    ("sim_feat", (True, True, False, False)),
    ("sim_feat_cyc", (True, True, True, False)),
    ("full", (True, True, True, True)),
)


def _write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects a comma-separated number list, got {text!r}")
    if not values:
        raise ConfigError(f"{flag} must not be empty")
    return values


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects a comma-separated integer list, got {text!r}")
    if not values:
        raise ConfigError(f"{flag} must not be empty")
    return values


def _masked_weights(weights, mask):
    sim, feat, cyc, adv = mask
    return replace(weights,
                   lambda_sim=weights.lambda_sim if sim else 0.0,
                   lambda_feat=weights.lambda_feat if feat else 0.0,
                   lambda_cyc=weights.lambda_cyc if cyc else 0.0,
                   lambda_adv=weights.lambda_adv if adv else 0.0)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    overrides = {"rho": args.rho}
    if args.seed is not None:
        overrides["world_seed"] = args.seed
    cfg = load_experiment_config(args.config, overrides)
    dataset = corpus_mod.build_dataset(cfg.world)
    corpus_mod.save_corpus(dataset, args.out)
    print(f"corpus written to {args.out}: "
          f"train={len(dataset.train.instances)} val={len(dataset.val.instances)} "
          f"test={len(dataset.test.instances)} rho={cfg.world.rho} seed={cfg.world.seed}")
    return 0


def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["train_seed"] = args.seed
    cfg = load_experiment_config(args.config, overrides)
    train_config = cfg.train.basic() if args.basic else cfg.train
    dataset = corpus_mod.load_corpus(args.corpus)
    result = trainer.train(dataset, train_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer.save_checkpoint(result.best, out / "best.ckpt")
    trainer.write_epoch_log(result.log, out / "train_log.jsonl")
    print(f"trained {len(result.log)} epochs; best val SumR "
          f"{result.best.best_val_sumr:.2f} at epoch {result.best.best_epoch}")
    return 0


def _evaluate_checkpoint(corpus_dir, checkpoint_path, beta=None, group_by_length=False,
                         with_t2t=False):
    dataset = corpus_mod.load_corpus(corpus_dir)
    ckpt = trainer.load_checkpoint(checkpoint_path)
    model, _, config, _ = trainer.build_from_checkpoint(ckpt)
    use_beta = config.weights.beta if beta is None else beta
    report = retrieval.evaluate(model, dataset.test, beta=use_beta,
                                v2t_fusion=config.v2t_fusion,
                                group_by_length=group_by_length, with_t2t=with_t2t)
    return dataset, model, config, use_beta, report


def cmd_eval(args) -> int:
    if args.beta is not None and not 0.0 <= args.beta <= 1.0:
        raise ConfigError("beta must be within [0, 1]")
    dataset, model, config, beta, report = _evaluate_checkpoint(
        args.corpus, args.checkpoint, args.beta, args.group_by_length, args.t2t)
    _write_json(args.out, report.to_dict())
    if args.rankings_out:
        retrieval.write_ranking_dump(args.rankings_out, dataset.test, model, beta=beta)
    print(f"test SumR {report.sumr:.2f} (beta={beta})")
    return 0


def cmd_sweep_noise(args) -> int:
    rhos = _parse_float_list(args.rhos, "--rhos")
    if len(rhos) < 2:
        raise ConfigError("--rhos needs at least 2 values")
    seeds = _parse_int_list(args.seeds, "--seeds")
    cfg = load_experiment_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": "noise-sweep", "rhos": rhos, "seeds": seeds,
                "compound": bool(args.compound), "cells": [], "complete": False}
    variants = (("full", cfg.train), ("basic", cfg.train.basic()))
    for rho in rhos:
        for seed in seeds:
            cell_name = f"rho{rho}_seed{seed}"
            try:
                world = replace(cfg.world, rho=rho, seed=seed,
                                compound_passes=2 if args.compound else cfg.world.compound_passes)
                world.validate()
                cell_dir = out / "cells" / cell_name
                corpus_dir = cell_dir / "corpus"
                dataset = corpus_mod.build_dataset(world)
                corpus_mod.save_corpus(dataset, corpus_dir)
                for variant, base_config in variants:
                    train_config = replace(base_config, seed=seed)
                    result = trainer.train(dataset, train_config)
                    vdir = cell_dir / variant
                    vdir.mkdir(parents=True, exist_ok=True)
                    trainer.save_checkpoint(result.best, vdir / "best.ckpt")
                    trainer.write_epoch_log(result.log, vdir / "train_log.jsonl")
                    model, _, _, _ = trainer.build_from_checkpoint(result.best)
                    report = retrieval.evaluate(model, dataset.test,
                                                beta=train_config.weights.beta,
                                                v2t_fusion=train_config.v2t_fusion,
                                                with_t2t=True)
                    _write_json(vdir / "metrics.json", report.to_dict())
                    manifest["cells"].append({
                        "rho": rho, "seed": seed, "variant": variant,
                        "sumr": report.sumr, "t2t_map": report.t2t_map,
                        "metrics": report.to_dict()})
                    print(f"[{cell_name}/{variant}] SumR {report.sumr:.2f} "
                          f"t2t mAP {report.t2t_map:.2f}")
            except Exception:
                _write_json(out / "experiment.json", manifest)
                print(f"error: sweep cell {cell_name} failed", file=sys.stderr)
                raise
    manifest["aggregates"] = _sweep_aggregates(manifest["cells"], rhos)
    manifest["complete"] = True
    _write_json(out / "experiment.json", manifest)
    return 0


def _sweep_aggregates(cells, rhos) -> dict:
    mean_sumr: dict = {}
    mean_t2t: dict = {}
    for variant in ("full", "basic"):
        mean_sumr[variant] = {}
        mean_t2t[variant] = {}
        for rho in rhos:
            vals = [c["sumr"] for c in cells if c["variant"] == variant and c["rho"] == rho]
            t2ts = [c["t2t_map"] for c in cells if c["variant"] == variant and c["rho"] == rho]
            mean_sumr[variant][str(rho)] = float(np.mean(vals))
            mean_t2t[variant][str(rho)] = float(np.mean(t2ts))
    degradation = {variant: mean_sumr[variant][str(rhos[0])] - mean_sumr[variant][str(rhos[-1])]
                   for variant in ("full", "basic")}
    return {"mean_sumr": mean_sumr, "mean_t2t_map": mean_t2t, "degradation": degradation}


def cmd_ablate(args) -> int:
    seeds = _parse_int_list(args.seeds, "--seeds")
    cfg = load_experiment_config(args.config)
    dataset = corpus_mod.load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": "ablation", "rows": [name for name, _ in ABLATION_ROWS],
                "seeds": seeds, "cells": [], "complete": False}
    for row_name, mask in ABLATION_ROWS:
        for seed in seeds:
            cell_name = f"{row_name}_seed{seed}"
            try:
                train_config = replace(cfg.train, seed=seed,
                                       weights=_masked_weights(cfg.train.weights, mask))
                result = trainer.train(dataset, train_config)
                vdir = out / "cells" / cell_name
                vdir.mkdir(parents=True, exist_ok=True)
                trainer.save_checkpoint(result.best, vdir / "best.ckpt")
                model, _, _, _ = trainer.build_from_checkpoint(result.best)
                report = retrieval.evaluate(model, dataset.test,
                                            beta=train_config.weights.beta,
                                            v2t_fusion=train_config.v2t_fusion,
                                            with_t2t=True)
                _write_json(vdir / "metrics.json", report.to_dict())
                manifest["cells"].append({
                    "row": row_name, "seed": seed, "sumr": report.sumr,
                    "t2t_map": report.t2t_map, "metrics": report.to_dict()})
                print(f"[{cell_name}] SumR {report.sumr:.2f}")
            except Exception:
                _write_json(out / "experiment.json", manifest)
                print(f"error: ablation cell {cell_name} failed", file=sys.stderr)
                raise
    manifest["aggregates"] = {
        "mean_sumr": {name: float(np.mean([c["sumr"] for c in manifest["cells"]
                                           if c["row"] == name]))
                      for name, _ in ABLATION_ROWS},
        "mean_t2t_map": {name: float(np.mean([c["t2t_map"] for c in manifest["cells"]
                                              if c["row"] == name]))
                         for name, _ in ABLATION_ROWS}}
    manifest["complete"] = True
    _write_json(out / "experiment.json", manifest)
    return 0


def cmd_dump_embeddings(args) -> int:
    dataset = corpus_mod.load_corpus(args.corpus)
    ckpt = trainer.load_checkpoint(args.checkpoint)
    model, _, config, dims = trainer.build_from_checkpoint(ckpt)
    split = dataset.split(args.split)
    embedder = retrieval.ModelEmbedder(model)
    videos = split.videos()
    n = args.sample
    if n > len(videos):
        print(f"warning: --sample {n} exceeds {len(videos)} videos; clamping",
              file=sys.stderr)
        n = len(videos)
    seed = args.seed if args.seed is not None else env_seed_default()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    chosen = sorted(rng.choice(len(videos), size=n, replace=False).tolist())
    video_ids = [list(videos)[i] for i in chosen]
    chosen_set = set(video_ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for vid in video_ids:
            vec = embedder.embed_video(videos[vid].features)
            fh.write(f"video\t{vid}\t-\t" + " ".join(f"{x:.17g}" for x in vec) + "\n")
        for inst in split.instances:
            if inst.video_id not in chosen_set:
                continue
            for kind, seq in (("src", inst.src), ("tgt", inst.tgt)):
                if seq is None:
                    continue
                vec = embedder.embed_text(seq)
                fh.write(f"{kind}\t{inst.video_id}\t{inst.caption_id}\t"
                         + " ".join(f"{x:.17g}" for x in vec) + "\n")
    print(f"dumped embeddings for {n} videos to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nrccr",
        description="noise-robust cross-lingual cross-modal retrieval lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic bilingual corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train on a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--basic", action="store_true",
                   help="triplet-only baseline (extra loss weights zeroed)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--group-by-length", action="store_true")
    p.add_argument("--t2t", action="store_true",
                   help="also report cross-lingual text-to-text mAP")
    p.add_argument("--rankings-out", default=None,
                   help="optional TSV dump of top-k rankings per query")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-noise", help="train full and basic models across noise rates")
    p.add_argument("--config", required=True)
    p.add_argument("--rhos", required=True)
    p.add_argument("--seeds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--compound", action="store_true",
                   help="apply two extra channel passes to training translations")
    p.set_defaults(func=cmd_sweep_noise)

    p = sub.add_parser("ablate", help="train the component-ablation grid")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-embeddings", help="write labeled common-space embeddings")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample", type=int, default=20)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_dump_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except (ConfigError, CorpusFormatError, CheckpointFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def entrypoint() -> None:  # console script
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
