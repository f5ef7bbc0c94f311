"""Synthetic bilingual video-caption world.

Videos belong to latent concepts; captions are token draws from a concept's
10-token support and frames are a fixed linear image of the concept's token
distribution plus Gaussian noise, so ground-truth relevance is well defined
and learnable at desk scale.

Machine translation is replaced by a seeded noisy channel: a vocabulary
bijection corrupted per token by substitution (rate rho, never emitting the
true image), deletion (rho/4) and insertion (rho/4). Back-translation runs
the channel twice with independent noise, so it compounds.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .encoders import SOURCE, TARGET, FrameFeatureSequence, TokenSequence
from .errors import ConfigError, CorpusFormatError

_ROLES = ("train", "val", "test")

# seed-stream tags so every generation stage draws from its own child stream
_STREAM_WORLD = 0
_STREAM_VIDEO = 1
_STREAM_TRANSLATE = 2
_STREAM_QUERY = 3
_STREAM_BATCH = 4


@dataclass(frozen=True)
class WorldConfig:
    vocab_size: int = 200          # |V_src| == |V_tgt|
    concepts: int = 50
    tokens_per_concept: int = 10
    caption_len_min: int = 4
    caption_len_max: int = 12
    frames_per_video: int = 8
    frame_dim: int = 32
    captions_per_video: int = 3
    train_videos: int = 600
    val_videos: int = 100
    test_videos: int = 100
    rho: float = 0.2               # channel noise rate during training
    eval_rho: Optional[float] = None  # noise on test-query translations; None = rho
    sigma_visual: float = 0.1
    compound_passes: int = 0       # extra channel passes on training translations
    seed: int = 0

    def validate(self) -> None:
        counts = ("vocab_size", "concepts", "tokens_per_concept", "caption_len_min",
                  "caption_len_max", "frames_per_video", "frame_dim", "captions_per_video",
                  "train_videos", "val_videos", "test_videos")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must be within [0, 1]")
        if self.eval_rho is not None and not 0.0 <= self.eval_rho <= 1.0:
            raise ConfigError("eval_rho must be within [0, 1]")
        if self.sigma_visual < 0:
            raise ConfigError("sigma_visual must be nonnegative")
        if self.caption_len_min > self.caption_len_max:
            raise ConfigError("caption_len_min must not exceed caption_len_max")
        if self.tokens_per_concept > self.vocab_size:
            raise ConfigError("tokens_per_concept must not exceed vocab_size")
        if self.compound_passes < 0 or self.compound_passes % 2:
            raise ConfigError("compound_passes must be an even count >= 0")

    @property
    def query_rho(self) -> float:
        return self.rho if self.eval_rho is None else self.eval_rho


@dataclass
class Instance:
    """One (video, caption) training unit with its noisy-channel companions."""

    video_id: str
    caption_id: str
    frames: FrameFeatureSequence
    src: Optional[TokenSequence]   # clean source caption (test: translated query)
    tgt: TokenSequence             # noisy translation (test: clean query)
    back: Optional[TokenSequence]  # round-trip translation of the source caption


@dataclass
class Split:
    role: str
    instances: list[Instance] = field(default_factory=list)

    def videos(self) -> "OrderedDict[str, FrameFeatureSequence]":
        seen: OrderedDict[str, FrameFeatureSequence] = OrderedDict()
        for inst in self.instances:
            if inst.video_id not in seen:
                seen[inst.video_id] = inst.frames
        return seen


@dataclass
class Dataset:
    config: WorldConfig
    train: Split
    val: Split
    test: Split

    def split(self, role: str) -> Split:
        if role not in _ROLES:
            raise ValueError(f"unknown split role {role!r}")
        return getattr(self, role)


# ---------------------------------------------------------------------------
# noisy channel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenTrace:
    substituted: bool
    deleted: bool
    inserted: bool
    out_index: Optional[int]  # emission position in the output; None if deleted


@dataclass(frozen=True)
class RoundTripTrace:
    survived: bool
    clean: bool


class TranslatorChannel:
    """Token bijection corrupted by seeded substitutions, deletions, insertions."""

    def __init__(self, permutation: np.ndarray):
        perm = np.asarray(permutation, dtype=np.intp)
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError("permutation must be a bijection on [0, vocab)")
        self.forward = perm
        self.inverse = np.argsort(perm)
        self.vocab = perm.size

    def image(self, token: int, from_lang: str) -> int:
        table = self.forward if from_lang == SOURCE else self.inverse
        return int(table[token])

    def _random_other(self, avoid: int, rng: np.random.Generator) -> int:
        draw = int(rng.integers(self.vocab - 1))
        return draw + 1 if draw >= avoid else draw

    def _pass(self, seq: TokenSequence, rho: float, rng: np.random.Generator):
        dest = TARGET if seq.lang == SOURCE else SOURCE
        out: list[int] = []
        traces: list[TokenTrace] = []
        for tok in seq.ids:
            image = self.image(tok, seq.lang)
            substituted = rng.random() < rho
            emitted = self._random_other(image, rng) if substituted else image
            deleted = rng.random() < rho / 4.0
            inserted = rng.random() < rho / 4.0
            out_index = None
            if not deleted:
                out_index = len(out)
                out.append(emitted)
            if inserted:
                out.append(int(rng.integers(self.vocab)))
            traces.append(TokenTrace(substituted, deleted, inserted, out_index))
        return out, traces, dest

    def translate_traced(self, seq: TokenSequence, rho: float,
                         rng: np.random.Generator) -> tuple[TokenSequence, list[TokenTrace]]:
        if not 0.0 <= rho <= 1.0:
            raise ValueError("rho must be within [0, 1]")
        # all-deleted outputs rerun the channel so the result stays nonempty
        while True:
            out, traces, dest = self._pass(seq, rho, rng)
            if out:
                return TokenSequence(dest, tuple(out)), traces

    def translate(self, seq: TokenSequence, rho: float,
                  rng: np.random.Generator) -> TokenSequence:
        return self.translate_traced(seq, rho, rng)[0]

    def back_translate_traced(self, seq: TokenSequence, rho: float,
                              rng: np.random.Generator) -> tuple[TokenSequence, list[RoundTripTrace]]:
        if seq.lang != SOURCE:
            raise ValueError("back-translation starts from a source-language sentence")
        mid, first = self.translate_traced(seq, rho, rng)
        out, second = self.translate_traced(mid, rho, rng)
        combined = []
        for tr in first:
            if tr.out_index is None:
                combined.append(RoundTripTrace(survived=False, clean=False))
                continue
            tr2 = second[tr.out_index]
            survived = tr2.out_index is not None
            clean = survived and not tr.substituted and not tr2.substituted
            combined.append(RoundTripTrace(survived, clean))
        return out, combined

    def back_translate(self, seq: TokenSequence, rho: float,
                       rng: np.random.Generator) -> TokenSequence:
        return self.back_translate_traced(seq, rho, rng)[0]

    def compound_translate(self, seq: TokenSequence, passes: int, rho: float,
                           rng: np.random.Generator) -> TokenSequence:
        """Repeated alternating channel application.

        Even pass counts keep the sequence in its own language, which is what
        a cross-lingual pipeline needs when piling extra noise on an already
        translated sentence; odd counts would strand it on the wrong side.
        """
        if passes < 2 or passes % 2:
            raise ValueError("compound_translate needs an even pass count >= 2")
        cur = seq
        for _ in range(passes):
            cur = self.translate(cur, rho, rng)
        return cur


def channel_statistics(channel: TranslatorChannel, rho: float, n_tokens: int,
                       seed: int = 0) -> dict[str, float]:
    """Empirical per-token event rates over ``n_tokens`` channel applications."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    token_rng = np.random.default_rng(np.random.SeedSequence([seed, 78]))
    subs = dels = ins = total = 0
    rt_clean = rt_survived = rt_total = 0
    chunk = 50
    while total < n_tokens or rt_total < n_tokens:
        ids = tuple(int(t) for t in token_rng.integers(channel.vocab, size=chunk))
        seq = TokenSequence(SOURCE, ids)
        if total < n_tokens:
            _, traces = channel.translate_traced(seq, rho, rng)
            for tr in traces:
                subs += tr.substituted
                dels += tr.deleted
                ins += tr.inserted
            total += len(traces)
        if rt_total < n_tokens:
            _, round_trip = channel.back_translate_traced(seq, rho, rng)
            for tr in round_trip:
                rt_survived += tr.survived
                rt_clean += tr.clean
            rt_total += len(round_trip)
    return {
        "substituted": subs / total,
        "deleted": dels / total,
        "inserted": ins / total,
        "round_trip_clean": rt_clean / rt_survived if rt_survived else 0.0,
        "round_trip_survival": rt_survived / rt_total,
    }


# ---------------------------------------------------------------------------
# world generation
# ---------------------------------------------------------------------------


@dataclass
class World:
    config: WorldConfig
    supports: list[np.ndarray]        # concept -> sorted token ids
    channel: TranslatorChannel
    feature_map: np.ndarray           # frame_dim x vocab


def generate_world(config: WorldConfig) -> World:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _STREAM_WORLD]))
    supports = [np.sort(rng.choice(config.vocab_size, size=config.tokens_per_concept,
                                   replace=False))
                for _ in range(config.concepts)]
    permutation = rng.permutation(config.vocab_size)
    feature_map = rng.standard_normal((config.frame_dim, config.vocab_size))
    feature_map /= math.sqrt(config.vocab_size)
    return World(config, supports, TranslatorChannel(permutation), feature_map)


def concept_distribution(world: World, concept: int) -> np.ndarray:
    w = np.zeros(world.config.vocab_size)
    w[world.supports[concept]] = 1.0 / world.config.tokens_per_concept
    return w


def synthesize_caption(world: World, concept: int, rng: np.random.Generator) -> TokenSequence:
    cfg = world.config
    length = int(rng.integers(cfg.caption_len_min, cfg.caption_len_max + 1))
    ids = rng.choice(world.supports[concept], size=length, replace=True)
    return TokenSequence(SOURCE, tuple(int(t) for t in ids))


def synthesize_instance(world: World, concept: int, rng: np.random.Generator,
                        video_id: str = "v") -> tuple[FrameFeatureSequence, TokenSequence]:
    """One video's frames plus a first caption, all drawn for ``concept``."""
    cfg = world.config
    if not 0 <= concept < cfg.concepts:
        raise ValueError(f"concept {concept} out of range [0, {cfg.concepts})")
    mean = world.feature_map @ concept_distribution(world, concept)
    noise = rng.standard_normal((cfg.frames_per_video, cfg.frame_dim))
    frames = mean[None, :] + cfg.sigma_visual * noise
    return FrameFeatureSequence(video_id, frames), synthesize_caption(world, concept, rng)


def build_dataset(config: WorldConfig) -> Dataset:
    """Deterministic world: same seed, byte-identical corpus.

    Training and validation instances carry rho-noisy translations and
    back-translations. Test instances carry a clean target-language query
    (the human-annotation analog) whose stored source side is that query
    channel-translated back at the inference noise rate.
    """
    world = generate_world(config)
    cfg = config
    channel = world.channel
    splits = {role: Split(role) for role in _ROLES}
    counts = {"train": cfg.train_videos, "val": cfg.val_videos, "test": cfg.test_videos}
    video_index = 0
    caption_index = 0
    for role in _ROLES:
        for i in range(counts[role]):
            concept = i % cfg.concepts
            video_id = f"v{video_index:05d}"
            vid_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, _STREAM_VIDEO, video_index]))
            frames, first = synthesize_instance(world, concept, vid_rng, video_id)
            captions = [first] + [synthesize_caption(world, concept, vid_rng)
                                  for _ in range(cfg.captions_per_video - 1)]
            for j, clean_src in enumerate(captions):
                caption_id = f"c{caption_index:06d}"
                tr_rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, _STREAM_TRANSLATE, video_index, j]))
                if role == "test":
                    tgt = channel.translate(clean_src, 0.0, tr_rng)  # clean query
                    back = channel.back_translate(clean_src, cfg.rho, tr_rng)
                    q_rng = np.random.default_rng(
                        np.random.SeedSequence([cfg.seed, _STREAM_QUERY, video_index, j]))
                    src = channel.translate(tgt, cfg.query_rho, q_rng)
                else:
                    tgt = channel.translate(clean_src, cfg.rho, tr_rng)
                    if cfg.compound_passes:
                        tgt = channel.compound_translate(tgt, cfg.compound_passes,
                                                         cfg.rho, tr_rng)
                    back = channel.back_translate(clean_src, cfg.rho, tr_rng)
                    src = clean_src
                splits[role].instances.append(
                    Instance(video_id, caption_id, frames, src, tgt, back))
                caption_index += 1
            video_index += 1
    return Dataset(cfg, splits["train"], splits["val"], splits["test"])


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def make_batches(split: Split, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Epoch-seeded shuffle into batches of instance indices.

    A batch never holds two captions of the same video (a second true caption
    would be a false hardest negative); batches shorter than 2 are dropped.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_BATCH, epoch]))
    remaining = [int(i) for i in rng.permutation(len(split.instances))]
    batches: list[list[int]] = []
    while remaining:
        batch: list[int] = []
        vids: set[str] = set()
        rest: list[int] = []
        for idx in remaining:
            vid = split.instances[idx].video_id
            if len(batch) < batch_size and vid not in vids:
                batch.append(idx)
                vids.add(vid)
            else:
                rest.append(idx)
        if len(batch) >= 2:
            batches.append(batch)
        remaining = rest
        if not batch:  # only same-video stragglers left and none fit
            break
    return batches


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_LANG_ROWS = ("src", "tgt", "back")


def _fmt_floats(vals: np.ndarray) -> str:
    return " ".join(f"{v:.17g}" for v in vals)


def save_corpus(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config

    manifest = asdict(cfg)
    with open(directory / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(directory / "features.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for role in _ROLES:
            for video_id, frames in dataset.split(role).videos().items():
                for fi, row in enumerate(frames.features):
                    fh.write(f"{video_id}\t{fi}\t{_fmt_floats(row)}\n")

    with open(directory / "captions.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for role in _ROLES:
            for inst in dataset.split(role).instances:
                rows = {"src": inst.src, "tgt": inst.tgt, "back": inst.back}
                for slot in _LANG_ROWS:
                    seq = rows[slot]
                    if seq is None:
                        continue
                    ids = " ".join(str(t) for t in seq.ids)
                    fh.write(f"{inst.caption_id}\t{inst.video_id}\t{slot}\t{role}\t{ids}\n")

    for name, prefix, size in (("vocab_src.tsv", "s", cfg.vocab_size),
                               ("vocab_tgt.tsv", "t", cfg.vocab_size)):
        with open(directory / name, "w", encoding="utf-8", newline="\n") as fh:
            for i in range(size):
                fh.write(f"{i}\t{prefix}{i:04d}\n")


def _manifest_config(path: Path) -> WorldConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CorpusFormatError(f"missing manifest: {path}")
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"{path}: invalid JSON ({e})")
    known = {f for f in WorldConfig.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise CorpusFormatError(f"{path}: unknown manifest fields {sorted(unknown)}")
    try:
        cfg = WorldConfig(**raw)
        cfg.validate()
    except (TypeError, ConfigError) as e:
        raise CorpusFormatError(f"{path}: bad manifest ({e})")
    return cfg


def load_corpus(directory) -> Dataset:
    directory = Path(directory)
    cfg = _manifest_config(directory / "manifest.json")

    feat_path = directory / "features.tsv"
    if not feat_path.exists():
        raise CorpusFormatError(f"missing file: {feat_path}")
    frames_by_video: OrderedDict[str, list[np.ndarray]] = OrderedDict()
    with open(feat_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise CorpusFormatError(f"{feat_path}:{lineno}: expected 3 tab fields")
            video_id, frame_index, payload = parts
            try:
                fi = int(frame_index)
                row = np.array([float(x) for x in payload.split()], dtype=np.float64)
            except ValueError as e:
                raise CorpusFormatError(f"{feat_path}:{lineno}: {e}")
            if row.size != cfg.frame_dim:
                raise CorpusFormatError(
                    f"{feat_path}:{lineno}: {row.size} values, manifest frame_dim is {cfg.frame_dim}")
            rows = frames_by_video.setdefault(video_id, [])
            if fi != len(rows):
                raise CorpusFormatError(
                    f"{feat_path}:{lineno}: frame index {fi} out of order for {video_id}")
            rows.append(row)
    videos = {vid: FrameFeatureSequence(vid, np.stack(rows))
              for vid, rows in frames_by_video.items()}

    cap_path = directory / "captions.tsv"
    if not cap_path.exists():
        raise CorpusFormatError(f"missing file: {cap_path}")
    records: OrderedDict[str, dict] = OrderedDict()
    with open(cap_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise CorpusFormatError(f"{cap_path}:{lineno}: expected 5 tab fields")
            caption_id, video_id, slot, role, payload = parts
            if slot not in _LANG_ROWS:
                raise CorpusFormatError(f"{cap_path}:{lineno}: unknown lang slot {slot!r}")
            if role not in _ROLES:
                raise CorpusFormatError(f"{cap_path}:{lineno}: unknown role {role!r}")
            if video_id not in videos:
                raise CorpusFormatError(f"{cap_path}:{lineno}: unknown video {video_id!r}")
            try:
                ids = tuple(int(t) for t in payload.split())
            except ValueError as e:
                raise CorpusFormatError(f"{cap_path}:{lineno}: {e}")
            if not ids:
                raise CorpusFormatError(f"{cap_path}:{lineno}: empty token list")
            lang = TARGET if slot == "tgt" else SOURCE
            rec = records.setdefault(caption_id, {"video": video_id, "role": role})
            if rec["video"] != video_id or rec["role"] != role:
                raise CorpusFormatError(
                    f"{cap_path}:{lineno}: caption {caption_id} changes video or role")
            if slot in rec:
                raise CorpusFormatError(f"{cap_path}:{lineno}: duplicate {slot} row")
            try:
                rec[slot] = TokenSequence(lang, ids)
            except ValueError as e:
                raise CorpusFormatError(f"{cap_path}:{lineno}: {e}")

    splits = {role: Split(role) for role in _ROLES}
    for caption_id, rec in records.items():
        if "tgt" not in rec:
            raise CorpusFormatError(f"{cap_path}: caption {caption_id} lacks a tgt row")
        splits[rec["role"]].instances.append(Instance(
            rec["video"], caption_id, videos[rec["video"]],
            rec.get("src"), rec["tgt"], rec.get("back")))
    return Dataset(cfg, splits["train"], splits["val"], splits["test"])
