"""Flat ``key = value`` configuration files shared by every command.

Lines are UTF-8, ``#`` starts a comment, unknown keys are errors. One file
carries world, training and loss-weight settings; each command reads the
part it needs. Command-line flags override file values; the NRCCR_SEED
environment variable is the last-resort seed default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .corpus import WorldConfig
from .errors import ConfigError
from .objectives import LossWeights
from .trainer import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() == "none" else float(text)


def _parse_opt_int(text: str) -> Optional[int]:
    return None if text.strip().lower() == "none" else int(text)


# key -> (section, field name, parser)
_WORLD_KEYS = {
    "vocab_size": int, "concepts": int, "tokens_per_concept": int,
    "caption_len_min": int, "caption_len_max": int, "frames_per_video": int,
    "frame_dim": int, "captions_per_video": int, "train_videos": int,
    "val_videos": int, "test_videos": int, "rho": float,
    "eval_rho": _parse_opt_float, "sigma_visual": float, "compound_passes": int,
}
_TRAIN_KEYS = {
    "lr": float, "batch_size": int, "epochs": int, "detach_teacher": _parse_bool,
    "freeze_embeddings": _parse_bool, "adv_mode": str, "token_dim": int,
    "common_dim": int, "heads": int, "ffn_mult": int, "hidden_dim": _parse_opt_int,
    "v2t_fusion": str, "patience": int, "lr_floor": float, "early_stop_patience": int,
}
_WEIGHT_KEYS = {
    "alpha": float, "lambda_sim": float, "lambda_feat": float, "lambda_cyc": float,
    "lambda_adv": float, "margin": float, "cyc_margin": float, "tau": float,
    "beta": float,
}
_SEED_KEYS = {"world_seed": int, "train_seed": int}

KNOWN_KEYS = {**{k: ("world", p) for k, p in _WORLD_KEYS.items()},
              **{k: ("train", p) for k, p in _TRAIN_KEYS.items()},
              **{k: ("weights", p) for k, p in _WEIGHT_KEYS.items()},
              **{k: ("seed", p) for k, p in _SEED_KEYS.items()}}


def read_config_file(path) -> dict[str, str]:
    """Raw key/value pairs; comments stripped, keys validated, no duplicates."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise ConfigError(f"missing config file: {path}")
    raw: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate config key '{key}'")
        raw[key] = value
    return raw


def env_seed_default() -> int:
    """NRCCR_SEED if set, else 0."""
    raw = os.environ.get("NRCCR_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"NRCCR_SEED must be an integer, got {raw!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig
    train: TrainConfig


def assemble(raw: dict[str, str], overrides: Optional[dict] = None) -> ExperimentConfig:
    """Typed configs from raw file pairs plus already-typed flag overrides."""
    world_kwargs: dict = {}
    train_kwargs: dict = {}
    weight_kwargs: dict = {}
    seeds: dict[str, int] = {}
    for key, text in raw.items():
        section, parser = KNOWN_KEYS[key]
        try:
            value = parser(text)
        except ValueError:
            raise ConfigError(f"invalid value for '{key}': {text!r}")
        if section == "world":
            world_kwargs[key] = value
        elif section == "train":
            train_kwargs[key] = value
        elif section == "weights":
            weight_kwargs[key] = value
        else:
            seeds[key] = value
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key '{key}'")
        section, _ = KNOWN_KEYS[key]
        if section == "world":
            world_kwargs[key] = value
        elif section == "train":
            train_kwargs[key] = value
        elif section == "weights":
            weight_kwargs[key] = value
        else:
            seeds[key] = value

    default_seed = env_seed_default()
    world = WorldConfig(seed=seeds.get("world_seed", default_seed), **world_kwargs)
    world.validate()
    train = TrainConfig(seed=seeds.get("train_seed", default_seed),
                        weights=LossWeights(**weight_kwargs), **train_kwargs)
    train.validate()
    return ExperimentConfig(world=world, train=train)


def load_experiment_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    return assemble(read_config_file(path), overrides)
