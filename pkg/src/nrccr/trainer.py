"""Deterministic minibatch training of the full objective.

One Adam optimizer covers encoders and discriminator; the adversarial term
uses gradient reversal by default (an ``alternating`` mode instead takes a
discriminator-only step before each main step). Learning rate halves on a
validation-SumR plateau and training stops early after a longer plateau;
the checkpoint with the best validation SumR is kept.

Everything is a pure function of (corpus seed, train seed, config): batches
are epoch-seeded, initialization is seeded, and no wall-clock state leaks
into logs or checkpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffmath as dm
from . import retrieval
from .corpus import Dataset, Instance, make_batches
from .diffmath import Tape, Tensor
from .encoders import Model, ModelDims
from .errors import CheckpointFormatError, ConfigError, TrainingDivergenceError
from .objectives import BatchEmbeddings, Discriminator, LossWeights, loss_adv, total_loss

CHECKPOINT_VERSION = "NRCCR-CKPT v1"

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8

_LOG_KEYS = ("loss_total", "loss_tri", "loss_sim", "loss_feat", "loss_cyc", "loss_adv")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    detach_teacher: bool = False
    freeze_embeddings: bool = False
    adv_mode: str = "reversal"          # reversal | alternating
    token_dim: int = 32
    common_dim: int = 16
    heads: int = 2
    ffn_mult: int = 2
    hidden_dim: Optional[int] = None
    v2t_fusion: str = "fused"           # fused | target_only
    patience: int = 2                   # epochs without improvement before halving lr
    lr_floor: float = 1e-6
    early_stop_patience: int = 5

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.adv_mode not in ("reversal", "alternating"):
            raise ConfigError("adv_mode must be 'reversal' or 'alternating'")
        if self.v2t_fusion not in ("fused", "target_only"):
            raise ConfigError("v2t_fusion must be 'fused' or 'target_only'")
        if self.patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        self.weights.validate()

    def basic(self) -> "TrainConfig":
        """The triplet-only ablation: all extra loss weights zeroed."""
        return replace(self, weights=replace(
            self.weights, lambda_sim=0.0, lambda_feat=0.0, lambda_cyc=0.0, lambda_adv=0.0))


def model_dims_for(dataset: Dataset, config: TrainConfig) -> ModelDims:
    """Model shape derived from the corpus (frame width, vocab, lengths)."""
    longest = 1
    for role in ("train", "val", "test"):
        for inst in dataset.split(role).instances:
            for seq in (inst.src, inst.tgt, inst.back):
                if seq is not None:
                    longest = max(longest, len(seq))
    return ModelDims(
        frame_dim=dataset.config.frame_dim,
        token_dim=config.token_dim,
        common_dim=config.common_dim,
        heads=config.heads,
        ffn_mult=config.ffn_mult,
        hidden_dim=config.hidden_dim,
        vocab_src=dataset.config.vocab_size,
        vocab_tgt=dataset.config.vocab_size,
        max_tokens=max(longest, dataset.config.caption_len_max),
        max_frames=dataset.config.frames_per_video)


def init_model(dims: ModelDims, seed: int) -> tuple[Model, Discriminator]:
    """Seeded parameter initialization; identical seed, identical bits."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    model = Model(dims, rng)
    disc = Discriminator(dims.token_dim, rng)
    return model, disc


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adam_step(named: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = _ADAM_BETA1, beta2: float = _ADAM_BETA2,
              eps: float = _ADAM_EPS) -> None:
    """Bias-corrected Adam update; tensors without a gradient are skipped."""
    for name, tensor in named.items():
        g = tensor.grad
        if g is None:
            continue
        if g.shape != tensor.values.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.values)
            state.v[name] = np.zeros_like(tensor.values)
            state.steps[name] = 0
        v = state.v[name]
        state.steps[name] += 1
        t = state.steps[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        tensor.values = tensor.values - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# batch forward
# ---------------------------------------------------------------------------


def forward_batch(model: Model, instances: list[Instance], weights: LossWeights,
                  detach_teacher: bool = False) -> BatchEmbeddings:
    """Encode one minibatch; paths for disabled loss terms are not built."""
    need_teacher = weights.lambda_sim > 0 or weights.lambda_feat > 0
    need_back = weights.lambda_cyc > 0
    need_adv = weights.lambda_adv > 0
    videos, srcs, tgts, backs, teachers, pooled_s, pooled_t = [], [], [], [], [], [], []
    for inst in instances:
        if inst.src is None:
            raise ConfigError(f"caption {inst.caption_id} lacks a source caption")
        m_src = model.text.embed(inst.src)
        m_tgt = model.text.embed(inst.tgt)
        videos.append(model.visual.encode(Tensor(inst.frames.features)))
        srcs.append(model.text.encode_from_tokens(m_src))
        tgts.append(model.text.encode_from_tokens(m_tgt))
        if need_teacher:
            h, _ = model.text.cross_attention(m_src, m_tgt)
            teacher = model.text.pool_project(h)
            teachers.append(dm.detach(teacher) if detach_teacher else teacher)
        if need_back:
            if inst.back is None:
                raise ConfigError(f"caption {inst.caption_id} lacks a back-translation")
            backs.append(model.text.encode_from_tokens(model.text.embed(inst.back)))
        if need_adv:
            pooled_s.append(dm.mean_pool_rows(m_src))
            pooled_t.append(dm.mean_pool_rows(m_tgt))
    return BatchEmbeddings(
        video=dm.stack_rows(videos),
        src=dm.stack_rows(srcs),
        tgt=dm.stack_rows(tgts),
        back=dm.stack_rows(backs) if need_back else None,
        teacher=dm.stack_rows(teachers) if need_teacher else None,
        src_tokens_pooled=dm.stack_rows(pooled_s) if need_adv else None,
        tgt_tokens_pooled=dm.stack_rows(pooled_t) if need_adv else None)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    version: str
    config: dict
    tensors: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_steps: dict[str, int]
    epoch: int
    best_val_sumr: float
    best_epoch: int
    lr: float
    stale: int


def _config_to_dict(config: TrainConfig, dims: ModelDims) -> dict:
    out = asdict(config)
    out["dims"] = asdict(dims)
    return out


def config_from_dict(raw: dict) -> tuple[TrainConfig, ModelDims]:
    raw = dict(raw)
    dims = ModelDims(**raw.pop("dims"))
    weights = LossWeights(**raw.pop("weights"))
    return TrainConfig(weights=weights, **raw), dims


def _snapshot(model: Model, disc: Discriminator, state: AdamState, config: TrainConfig,
              dims: ModelDims, epoch: int, best_val_sumr: float, best_epoch: int,
              lr: float, stale: int) -> Checkpoint:
    named = {**model.named_tensors(), **disc.named_tensors()}
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        config=_config_to_dict(config, dims),
        tensors={k: t.values.copy() for k, t in named.items()},
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        adam_steps=dict(state.steps),
        epoch=epoch, best_val_sumr=best_val_sumr, best_epoch=best_epoch,
        lr=lr, stale=stale)


def _encode_values(arr: np.ndarray) -> str:
    raw = arr.astype(">f8").tobytes().hex()
    return " ".join(raw[i:i + 16] for i in range(0, len(raw), 16))


def _decode_values(parts: list[str], lineno: int, path) -> np.ndarray:
    try:
        buf = bytes.fromhex("".join(parts))
    except ValueError:
        raise CheckpointFormatError(f"{path}:{lineno}: invalid hex payload")
    return np.frombuffer(buf, dtype=">f8").astype(np.float64)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    meta = {"config": ckpt.config, "epoch": ckpt.epoch,
            "best_val_sumr": ckpt.best_val_sumr, "best_epoch": ckpt.best_epoch,
            "lr": ckpt.lr, "stale": ckpt.stale, "adam_steps": ckpt.adam_steps}
    records: dict[str, np.ndarray] = dict(ckpt.tensors)
    for k, v in ckpt.adam_m.items():
        records[f"adam.m.{k}"] = v
    for k, v in ckpt.adam_v.items():
        records[f"adam.v.{k}"] = v
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(ckpt.version + "\n")
        fh.write("meta\t" + json.dumps(meta, sort_keys=True) + "\n")
        for name in sorted(records):
            arr = records[name]
            shape = ",".join(str(s) for s in arr.shape)
            fh.write(f"{name}\t{shape}\t{_encode_values(arr)}\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise CheckpointFormatError(f"missing checkpoint: {path}")
    if not lines or lines[0] != CHECKPOINT_VERSION:
        head = lines[0] if lines else "<empty>"
        raise CheckpointFormatError(f"{path}: unrecognized version {head!r}")
    if len(lines) < 2 or not lines[1].startswith("meta\t"):
        raise CheckpointFormatError(f"{path}:2: missing meta record")
    try:
        meta = json.loads(lines[1].split("\t", 1)[1])
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"{path}:2: bad meta JSON ({e})")
    tensors, adam_m, adam_v = {}, {}, {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CheckpointFormatError(f"{path}:{lineno}: expected 3 tab fields")
        name, shape_s, payload = parts
        try:
            shape = tuple(int(s) for s in shape_s.split(",") if s)
        except ValueError:
            raise CheckpointFormatError(f"{path}:{lineno}: bad shape {shape_s!r}")
        arr = _decode_values(payload.split(), lineno, path)
        expect = int(np.prod(shape)) if shape else 1
        if arr.size != expect:
            raise CheckpointFormatError(
                f"{path}:{lineno}: {arr.size} values for shape {shape}")
        arr = arr.reshape(shape)
        if name.startswith("adam.m."):
            adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v."):]] = arr
        else:
            tensors[name] = arr
    return Checkpoint(
        version=CHECKPOINT_VERSION, config=meta["config"], tensors=tensors,
        adam_m=adam_m, adam_v=adam_v, adam_steps=meta.get("adam_steps", {}),
        epoch=meta["epoch"], best_val_sumr=meta["best_val_sumr"],
        best_epoch=meta.get("best_epoch", meta["epoch"]),
        lr=meta["lr"], stale=meta.get("stale", 0))


def build_from_checkpoint(ckpt: Checkpoint) -> tuple[Model, Discriminator, TrainConfig, ModelDims]:
    config, dims = config_from_dict(ckpt.config)
    model, disc = init_model(dims, config.seed)
    named = {**model.named_tensors(), **disc.named_tensors()}
    missing = set(named) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(named)
    if missing or extra:
        raise CheckpointFormatError(
            f"checkpoint tensor names do not match the architecture "
            f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, tensor in named.items():
        stored = ckpt.tensors[name]
        if stored.shape != tensor.values.shape:
            raise CheckpointFormatError(
                f"checkpoint tensor {name} has shape {stored.shape}, "
                f"expected {tensor.values.shape}")
        tensor.values = stored.copy()
    return model, disc, config, dims


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list[dict]


def _disc_only_step(model: Model, disc: Discriminator, instances: list[Instance],
                    state: AdamState, lr: float) -> None:
    # pooled token features are recomputed as constants: only the
    # discriminator trains in this step
    pooled_s, pooled_t = [], []
    for inst in instances:
        pooled_s.append(dm.mean_pool_rows(model.text.embed(inst.src)))
        pooled_t.append(dm.mean_pool_rows(model.text.embed(inst.tgt)))
    batch = BatchEmbeddings(
        video=Tensor(np.zeros((len(instances), 1))),
        src=Tensor(np.zeros((len(instances), 1))),
        tgt=Tensor(np.zeros((len(instances), 1))),
        src_tokens_pooled=Tensor(np.stack([p.values for p in pooled_s])),
        tgt_tokens_pooled=Tensor(np.stack([p.values for p in pooled_t])))
    named = disc.named_tensors()
    dm.clear_grads(named.values())
    with Tape() as tape:
        objective = dm.scale(loss_adv(batch, disc, reverse=False), -1.0)
        tape.backward(objective)
    adam_step(named, state, lr)


def train(dataset: Dataset, config: TrainConfig,
          resume: Optional[Checkpoint] = None) -> TrainResult:
    """Run the optimization and return best/last checkpoints plus the epoch log.

    With ``resume`` the model, optimizer moments and schedule state come from
    the checkpoint and training continues at the next epoch; a resumed run
    reproduces an uninterrupted one exactly because batch order depends only
    on (seed, epoch). The returned best checkpoint tracks improvements seen
    by this call (the resume point included).
    """
    config.validate()
    if not dataset.train.instances:
        raise ConfigError("corpus has no training instances")
    if not dataset.val.instances:
        raise ConfigError("corpus has no validation instances")

    dims = model_dims_for(dataset, config)
    if resume is None:
        model, disc = init_model(dims, config.seed)
        state = AdamState()
        lr = config.lr
        stale = 0
        best_sumr = -math.inf
        best_epoch = -1
        start_epoch = 0
    else:
        model, disc, _, dims = build_from_checkpoint(resume)
        state = AdamState(m={k: v.copy() for k, v in resume.adam_m.items()},
                          v={k: v.copy() for k, v in resume.adam_v.items()},
                          steps=dict(resume.adam_steps))
        lr = resume.lr
        stale = resume.stale
        best_sumr = resume.best_val_sumr
        best_epoch = resume.best_epoch
        start_epoch = resume.epoch + 1

    if config.freeze_embeddings:
        model.text.tok_table.requires_grad = False
        model.text.pos_table.requires_grad = False

    named = {**model.named_tensors(), **disc.named_tensors()}
    trainable = {k: t for k, t in named.items() if t.requires_grad}
    weights = config.weights

    def snapshot(epoch):
        return _snapshot(model, disc, state, config, dims, epoch,
                         best_sumr, best_epoch, lr, stale)

    best_ckpt = snapshot(start_epoch - 1) if resume is not None else None
    log: list[dict] = []

    for epoch in range(start_epoch, config.epochs):
        batches = make_batches(dataset.train, config.batch_size, config.seed, epoch)
        if not batches:
            raise ConfigError("no usable batches; shrink batch_size or grow the corpus")
        sums = {k: 0.0 for k in _LOG_KEYS}
        for bi, batch_ids in enumerate(batches):
            instances = [dataset.train.instances[i] for i in batch_ids]
            if config.adv_mode == "alternating" and weights.lambda_adv > 0:
                _disc_only_step(model, disc, instances, state, lr)
            dm.clear_grads(named.values())
            try:
                with Tape() as tape:
                    batch = forward_batch(model, instances, weights,
                                          detach_teacher=config.detach_teacher)
                    loss, parts = total_loss(batch, weights, disc, adv_reverse=True)
                    if not np.isfinite(loss.values):
                        raise dm.NonFiniteError("loss")
                    tape.backward(loss)
            except dm.NonFiniteError as e:
                raise TrainingDivergenceError(epoch, bi) from e
            adam_step(trainable, state, lr)
            for k in _LOG_KEYS:
                sums[k] += parts[k]
        n = len(batches)
        val_report = retrieval.evaluate(model, dataset.val, beta=weights.beta,
                                        v2t_fusion=config.v2t_fusion)
        entry = {"epoch": epoch, "lr": lr}
        entry.update({k: sums[k] / n for k in _LOG_KEYS})
        entry["val_sumr"] = val_report.sumr
        log.append(entry)

        if val_report.sumr > best_sumr:
            best_sumr = val_report.sumr
            best_epoch = epoch
            stale = 0
            best_ckpt = snapshot(epoch)
        else:
            stale += 1
            if stale % config.patience == 0:
                lr = max(lr / 2.0, config.lr_floor)
            if stale >= config.early_stop_patience:
                break

    last_ckpt = snapshot(log[-1]["epoch"] if log else start_epoch - 1)
    if best_ckpt is None:
        best_ckpt = last_ckpt
    return TrainResult(best=best_ckpt, last=last_ckpt, log=log)


def write_epoch_log(log: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
