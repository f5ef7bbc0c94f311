"""Batch-level training objectives: bidirectional hardest-negative triplet
losses, the two self-distillation views (softmax-similarity KL and L1
feature matching), cycle consistency against back-translations, and the
language discriminator with gradient-reversal routing.

Every loss reduces with a mean over the batch instances. Hardest negatives
are mined on similarity values (argmax ties break toward the smallest
index), and gradients flow through the selected entries only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

_PROB_FLOOR = 1e-12
_DISC_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Scalar knobs of the training objective and inference fusion."""

    alpha: float = 0.6        # weight of the target-language triplet term
    lambda_sim: float = 0.4   # similarity-view distillation
    lambda_feat: float = 0.1  # feature-view distillation
    lambda_cyc: float = 0.5   # cycle consistency
    lambda_adv: float = 1e-3  # adversarial language alignment
    margin: float = 0.2       # triplet margin (video-text)
    cyc_margin: float = 0.2   # triplet margin (cycle consistency)
    tau: float = 0.05         # softmax temperature for distillation
    beta: float = 0.8         # inference-time score fusion weight

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.margin < 0 or self.cyc_margin < 0:
            raise ValueError("margins must be nonnegative")
        for name in ("lambda_sim", "lambda_feat", "lambda_cyc", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be within [0, 1]")


@dataclass
class BatchEmbeddings:
    """Stacked common-space embeddings for one minibatch.

    ``teacher``, ``back`` and the pooled token features are present only when
    the corresponding loss terms are enabled.
    """

    video: Tensor                          # B x d
    src: Tensor                            # B x d
    tgt: Tensor                            # B x d
    back: Optional[Tensor] = None          # B x d
    teacher: Optional[Tensor] = None       # B x d
    src_tokens_pooled: Optional[Tensor] = None  # B x token_dim, pre-transformer
    tgt_tokens_pooled: Optional[Tensor] = None  # B x token_dim, pre-transformer

    @property
    def size(self) -> int:
        return self.video.shape[0]

    def validate(self) -> None:
        if self.size < 2:
            raise ValueError("a batch needs at least 2 instances for negative mining")


class Discriminator:
    """Language classifier on pooled token features: two affine layers with a
    relu between, sigmoid output in (0, 1)."""

    def __init__(self, in_dim: int, rng: np.random.Generator):
        hidden = max(1, in_dim // 2)
        bound1 = 1.0 / np.sqrt(in_dim)
        bound2 = 1.0 / np.sqrt(hidden)
        self.w1 = Tensor(rng.uniform(-bound1, bound1, (in_dim, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.uniform(-bound2, bound2, (hidden, 1)), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def probs(self, x: Tensor) -> Tensor:
        """P(source language) for each row of x."""
        h = dm.affine(x, self.w1, self.b1, activation="relu")
        return dm.sigmoid(dm.affine(h, self.w2, self.b2))

    def named_tensors(self, prefix: str = "disc") -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def hardest_negative_triplet(anchors: Tensor, positives: Tensor, margin: float) -> Tensor:
    """Bidirectional hinge against the hardest in-batch negatives.

    For each pair i the loss adds ``max(0, margin + sim(a_i, p_j*) - sim(a_i, p_i))``
    with j* the most similar non-matching positive, plus the symmetric term
    mining over anchors; the result is the sum over the B pairs. The sum
    reduction follows the hard-negative ranking-loss lineage this term comes
    from; the distillation and adversarial terms average instead, and the
    published mixture weights presuppose exactly that imbalance.
    """
    b = anchors.shape[0]
    if b < 2:
        raise ValueError("hardest-negative mining needs a batch of at least 2")
    sims = dm.cosine_matrix(anchors, positives)
    vals = sims.values
    idx = np.arange(b)
    off = vals.copy()
    off[idx, idx] = -np.inf
    hardest_cols = off.argmax(axis=1)   # per anchor: most similar wrong positive
    hardest_rows = off.argmax(axis=0)   # per positive: most similar wrong anchor
    pos = dm.pick(sims, idx, idx)
    neg_for_anchor = dm.pick(sims, idx, hardest_cols)
    neg_for_positive = dm.pick(sims, hardest_rows, idx)
    h1 = dm.relu(dm.add(dm.sub(neg_for_anchor, pos), margin))
    h2 = dm.relu(dm.add(dm.sub(neg_for_positive, pos), margin))
    return dm.sum_all(dm.add(h1, h2))


def loss_tri(batch: BatchEmbeddings, weights: LossWeights) -> Tensor:
    """Video-text triplet loss over both language branches."""
    ls = hardest_negative_triplet(batch.video, batch.src, weights.margin)
    lt = hardest_negative_triplet(batch.video, batch.tgt, weights.margin)
    return dm.add(ls, dm.scale(lt, weights.alpha))


def similarity_distribution(query: Tensor, keys: Tensor, tau: float) -> Tensor:
    """Softmax over cosine similarities of one query against a key set."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    row = dm.cosine_matrix(dm.stack_rows([query]), keys)
    return dm.reshape(dm.softmax_rows(row, temperature=tau), (keys.shape[0],))


def kl_divergence(q: Tensor, p: Tensor) -> Tensor:
    """KL(q || p) with 0*ln(0) treated as 0 and p floored at 1e-12."""
    lq = dm.log(dm.clip(q, lo=_PROB_FLOOR))
    lp = dm.log(dm.clip(p, lo=_PROB_FLOOR))
    return dm.sum_all(dm.mul(q, dm.sub(lq, lp)))


def _kl_rows_mean(q: Tensor, p: Tensor) -> Tensor:
    rows = q.shape[0]
    return dm.scale(kl_divergence(q, p), 1.0 / rows)


def similarity_targets(batch: BatchEmbeddings, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Teacher softmax-similarity distributions as constant soft targets."""
    if batch.teacher is None:
        raise ValueError("similarity targets need teacher embeddings")
    teacher = dm.detach(batch.teacher)
    video = dm.detach(batch.video)
    q_t2v = dm.softmax_rows(dm.cosine_matrix(teacher, video), temperature=tau)
    q_v2t = dm.softmax_rows(dm.cosine_matrix(video, teacher), temperature=tau)
    return q_t2v.values, q_v2t.values


def loss_sim(batch: BatchEmbeddings, weights: LossWeights,
             targets: Optional[tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """Similarity-view distillation: mean KL from the teacher's softmax
    similarity distributions (text-to-video and video-to-text) to the
    target branch's.

    The teacher distributions are soft targets, not a differentiable path:
    were gradients allowed through them, the encoder could shrink this loss
    by degenerating embeddings until teacher and student distributions agree
    trivially. ``targets`` injects precomputed distributions (used by the
    finite-difference checks); by default they are derived from the batch.
    """
    if targets is None:
        targets = similarity_targets(batch, weights.tau)
    tau = weights.tau
    q_t2v, q_v2t = Tensor(targets[0]), Tensor(targets[1])
    p_t2v = dm.softmax_rows(dm.cosine_matrix(batch.tgt, batch.video), temperature=tau)
    p_v2t = dm.softmax_rows(dm.cosine_matrix(batch.video, batch.tgt), temperature=tau)
    return dm.scale(dm.add(_kl_rows_mean(q_t2v, p_t2v), _kl_rows_mean(q_v2t, p_v2t)), 0.5)


def loss_feat(batch: BatchEmbeddings) -> Tensor:
    """Feature-view distillation: mean L1 distance teacher vs target branch."""
    if batch.teacher is None:
        raise ValueError("loss_feat needs teacher embeddings")
    diff = dm.abs_(dm.sub(batch.teacher, batch.tgt))
    return dm.scale(dm.sum_all(diff), 1.0 / batch.size)


def loss_cyc(batch: BatchEmbeddings, weights: LossWeights) -> Tensor:
    """Cycle consistency: back-translations anchor against their originals."""
    if batch.back is None:
        raise ValueError("loss_cyc needs back-translation embeddings")
    return hardest_negative_triplet(batch.back, batch.src, weights.cyc_margin)


def loss_adv(batch: BatchEmbeddings, disc: Discriminator,
             reverse: bool = True, reverse_gain: float = 1.0) -> Tensor:
    """Discriminator log-likelihood of correct language classification.

    With ``reverse`` on, a gradient-reversal boundary sits between the pooled
    token features and the discriminator: combined with the negative weight
    this term carries in the total loss, discriminator parameters ascend this
    quantity while encoder parameters descend it (they learn to confuse the
    classifier).
    """
    if batch.src_tokens_pooled is None or batch.tgt_tokens_pooled is None:
        raise ValueError("loss_adv needs pooled token features")
    xs, xt = batch.src_tokens_pooled, batch.tgt_tokens_pooled
    if reverse:
        xs = dm.grad_reverse(xs, gain=reverse_gain)
        xt = dm.grad_reverse(xt, gain=reverse_gain)
    fs = dm.clip(disc.probs(xs), lo=_DISC_CLAMP, hi=1.0 - _DISC_CLAMP)
    ft = dm.clip(disc.probs(xt), lo=_DISC_CLAMP, hi=1.0 - _DISC_CLAMP)
    term = dm.add(dm.log(fs), dm.log(dm.add(dm.scale(ft, -1.0), 1.0)))
    return dm.scale(dm.sum_all(term), 1.0 / batch.size)


def total_loss(batch: BatchEmbeddings, weights: LossWeights, disc: Optional[Discriminator],
               adv_reverse: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Full objective plus a per-component breakdown for logging.

    Disabled components (zero weight) are never constructed, so a run with
    all extra weights at zero builds exactly the plain triplet graph.
    """
    batch.validate()
    total = loss_tri(batch, weights)
    parts = {"loss_tri": float(total.values), "loss_sim": 0.0, "loss_feat": 0.0,
             "loss_cyc": 0.0, "loss_adv": 0.0}
    if weights.lambda_sim > 0:
        ls = loss_sim(batch, weights)
        parts["loss_sim"] = float(ls.values)
        total = dm.add(total, dm.scale(ls, weights.lambda_sim))
    if weights.lambda_feat > 0:
        lf = loss_feat(batch)
        parts["loss_feat"] = float(lf.values)
        total = dm.add(total, dm.scale(lf, weights.lambda_feat))
    if weights.lambda_cyc > 0:
        lc = loss_cyc(batch, weights)
        parts["loss_cyc"] = float(lc.values)
        total = dm.add(total, dm.scale(lc, weights.lambda_cyc))
    if weights.lambda_adv > 0:
        if disc is None:
            raise ValueError("lambda_adv > 0 requires a discriminator")
        la = loss_adv(batch, disc, reverse=adv_reverse)
        parts["loss_adv"] = float(la.values)
        total = dm.add(total, dm.scale(la, -weights.lambda_adv))
    parts["loss_total"] = float(total.values)
    return total, parts
