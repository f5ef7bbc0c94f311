"""The retrieval network: a frame transformer for video, one weight-shared
bilingual text transformer sitting on a learned token-embedding table, a
cross-attention module that reads noisy target-language tokens under clean
source-language queries, and two projection heads into the common space.

The token table plus learned positional embeddings stand in for a pretrained
multilingual text backbone; both languages live in one table under disjoint
id ranges, so the "source branch" and "target branch" are literally the same
function over shared parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

SOURCE = "src"
TARGET = "tgt"


@dataclass(frozen=True)
class TokenSequence:
    """A caption as integer token ids, tagged with its language."""

    lang: str
    ids: tuple[int, ...]

    def __post_init__(self):
        if self.lang not in (SOURCE, TARGET):
            raise ValueError(f"language tag must be '{SOURCE}' or '{TARGET}', got {self.lang!r}")
        if len(self.ids) < 1:
            raise ValueError("token sequence must be nonempty")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class FrameFeatureSequence:
    """Precomputed per-frame features for one video."""

    video_id: str
    features: np.ndarray  # l x frame_dim

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("frame features must be a nonempty l x d matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("frame features must be finite")


@dataclass(frozen=True)
class ModelDims:
    frame_dim: int = 32      # per-frame feature width
    token_dim: int = 32      # text transformer width
    common_dim: int = 16     # shared embedding space width
    heads: int = 2
    ffn_mult: int = 2
    hidden_dim: Optional[int] = None  # projection-head hidden width; default 2*common_dim
    vocab_src: int = 200
    vocab_tgt: int = 200
    max_tokens: int = 128
    max_frames: int = 64

    @property
    def head_hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else 2 * self.common_dim

    def validate(self) -> None:
        for name in ("frame_dim", "token_dim", "common_dim", "heads", "ffn_mult",
                     "vocab_src", "vocab_tgt", "max_tokens", "max_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.token_dim % self.heads or self.frame_dim % self.heads:
            raise ValueError("heads must divide token_dim and frame_dim")


def _uniform(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> Tensor:
    bound = scale / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def sinusoidal_table(length: int, width: int) -> np.ndarray:
    """Fixed sin/cos position table (even columns sin, odd columns cos)."""
    pos = np.arange(length)[:, None].astype(np.float64)
    idx = np.arange(width)[None, :].astype(np.float64)
    angles = pos / np.power(10_000.0, 2.0 * np.floor(idx / 2.0) / width)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table


class TransformerBlock:
    """One post-norm block: multi-head self-attention then a relu FFN,
    each followed by a residual add and layer norm."""

    def __init__(self, width: int, heads: int, ffn_mult: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError("heads must divide width")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        hd = self.head_dim
        self.wq = [_uniform(rng, (width, hd), width) for _ in range(heads)]
        self.wk = [_uniform(rng, (width, hd), width) for _ in range(heads)]
        self.wv = [_uniform(rng, (width, hd), width) for _ in range(heads)]
        self.wo = _uniform(rng, (width, width), width)
        self.wo_b = _zeros(width)
        f = width * ffn_mult
        self.ffn_w1 = _uniform(rng, (width, f), width)
        self.ffn_b1 = _zeros(f)
        self.ffn_w2 = _uniform(rng, (f, width), f)
        self.ffn_b2 = _zeros(width)
        self.norm1_gain = _ones(width)
        self.norm1_bias = _zeros(width)
        self.norm2_gain = _ones(width)
        self.norm2_bias = _zeros(width)

    def forward(self, x: Tensor) -> Tensor:
        inv = 1.0 / math.sqrt(self.head_dim)
        parts = []
        for i in range(self.heads):
            q = dm.matmul(x, self.wq[i])
            k = dm.matmul(x, self.wk[i])
            v = dm.matmul(x, self.wv[i])
            w = dm.softmax_rows(dm.scale(dm.matmul(q, dm.transpose(k)), inv))
            parts.append(dm.matmul(w, v))
        a = parts[0] if self.heads == 1 else dm.concat_cols(parts)
        a = dm.affine(a, self.wo, self.wo_b)
        return self.post_attention(x, a)

    def post_attention(self, stream: Tensor, attended: Tensor) -> Tensor:
        """The block's machinery after an attention step: residual add and
        first norm, then the FFN sublayer with its residual and second norm.

        ``forward`` uses it with self-attention output; the cross-attention
        teacher reuses it verbatim with the source stream as residual, which
        keeps teacher states in the same functional family as the student
        states they supervise (a residual-free tail lets the feature-matching
        loss degrade the shared FFN instead of aligning representations).
        """
        x = dm.layer_norm_rows(dm.add(stream, attended), self.norm1_gain, self.norm1_bias)
        f = dm.affine(dm.affine(x, self.ffn_w1, self.ffn_b1, activation="relu"),
                      self.ffn_w2, self.ffn_b2)
        return dm.layer_norm_rows(dm.add(x, f), self.norm2_gain, self.norm2_bias)

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        for i in range(self.heads):
            named[f"{prefix}.h{i}.wq"] = self.wq[i]
            named[f"{prefix}.h{i}.wk"] = self.wk[i]
            named[f"{prefix}.h{i}.wv"] = self.wv[i]
        named[f"{prefix}.wo"] = self.wo
        named[f"{prefix}.wo_b"] = self.wo_b
        named[f"{prefix}.ffn_w1"] = self.ffn_w1
        named[f"{prefix}.ffn_b1"] = self.ffn_b1
        named[f"{prefix}.ffn_w2"] = self.ffn_w2
        named[f"{prefix}.ffn_b2"] = self.ffn_b2
        named[f"{prefix}.norm1_gain"] = self.norm1_gain
        named[f"{prefix}.norm1_bias"] = self.norm1_bias
        named[f"{prefix}.norm2_gain"] = self.norm2_gain
        named[f"{prefix}.norm2_bias"] = self.norm2_bias
        return named


class ProjectionHead:
    """Two affine layers with a relu between, mapping onto the unit sphere
    of the common space. Similarities are cosine throughout, so norms carry
    no information; normalizing here keeps every common-space loss (hinge,
    KL, L1) a pure function of direction."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.w1 = _uniform(rng, (in_dim, hidden), in_dim)
        self.b1 = _zeros(hidden)
        self.w2 = _uniform(rng, (hidden, out_dim), hidden)
        self.b2 = _zeros(out_dim)

    def apply(self, vec: Tensor) -> Tensor:
        out = dm.affine_vec(dm.affine_vec(vec, self.w1, self.b1, activation="relu"),
                            self.w2, self.b2)
        return dm.unit_vec(out)

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


class VisualEncoder:
    """Frame transformer with fixed sinusoidal positions, pooled and projected."""

    # precomputed features are small relative to unit-amplitude sinusoids,
    # so the position table is damped to keep content visible
    POSITION_SCALE = 0.1

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        self.dims = dims
        self.block = TransformerBlock(dims.frame_dim, dims.heads, dims.ffn_mult, rng)
        self.head = ProjectionHead(dims.frame_dim, dims.head_hidden, dims.common_dim, rng)
        self.positions = self.POSITION_SCALE * sinusoidal_table(dims.max_frames, dims.frame_dim)

    def encode(self, frames: Tensor) -> Tensor:
        l, w = frames.shape
        if w != self.dims.frame_dim:
            raise ValueError(f"frame width {w} != configured {self.dims.frame_dim}")
        if l < 1 or l > self.dims.max_frames:
            raise ValueError(f"frame count {l} outside [1, {self.dims.max_frames}]")
        x = dm.add(frames, Tensor(self.positions[:l]))
        x = self.block.forward(x)
        return self.head.apply(dm.mean_pool_rows(x))

    def named_tensors(self) -> dict[str, Tensor]:
        named = self.block.named_tensors("vis.block")
        named.update(self.head.named_tensors("vis.head"))
        return named


class TextEncoder:
    """Shared bilingual encoder plus the cross-attention teacher path.

    One token table serves both languages: source ids occupy rows
    [0, vocab_src) and target ids rows [vocab_src, vocab_src+vocab_tgt).
    """

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        self.dims = dims
        dw = dims.token_dim
        # 0.1-scaled token embeddings stay highly plastic under Adam (their
        # update step is large relative to the init), which is what learning
        # the bilingual geometry from scratch needs; positions start at zero
        # so they only enter once they earn weight
        self.tok_table = _uniform(rng, (dims.vocab_src + dims.vocab_tgt, dw), dw, scale=0.1)
        self.pos_table = Tensor(np.zeros((dims.max_tokens, dw)), requires_grad=True)
        self.block = TransformerBlock(dw, dims.heads, dims.ffn_mult, rng)
        # identity-plus-noise start: cross attention then scores raw embedding
        # similarity from step one, which is what a translation-noise filter
        # needs before any distillation gradient arrives
        self.cross_wq = self._near_identity(dw, rng)
        self.cross_wk = self._near_identity(dw, rng)
        self.cross_wv = self._near_identity(dw, rng)
        self.head = ProjectionHead(dw, dims.head_hidden, dims.common_dim, rng)
        self._unit_gain = Tensor(np.ones(dw))
        self._zero_bias = Tensor(np.zeros(dw))

    @staticmethod
    def _near_identity(dw: int, rng: np.random.Generator) -> Tensor:
        bound = 0.1 / math.sqrt(dw)
        return Tensor(np.eye(dw) + rng.uniform(-bound, bound, (dw, dw)),
                      requires_grad=True)

    def _global_ids(self, seq: TokenSequence) -> list[int]:
        vocab = self.dims.vocab_src if seq.lang == SOURCE else self.dims.vocab_tgt
        offset = 0 if seq.lang == SOURCE else self.dims.vocab_src
        for t in seq.ids:
            if not 0 <= t < vocab:
                raise ValueError(f"token id {t} out of range for {seq.lang} vocab of {vocab}")
        return [t + offset for t in seq.ids]

    def embed(self, seq: TokenSequence) -> Tensor:
        n = len(seq)
        if n > self.dims.max_tokens:
            raise ValueError(f"sequence length {n} exceeds max_tokens {self.dims.max_tokens}")
        tok = dm.embed_rows(self.tok_table, self._global_ids(seq))
        pos = dm.embed_rows(self.pos_table, list(range(n)))
        return dm.add(tok, pos)

    def encode_from_tokens(self, m: Tensor) -> Tensor:
        if m.shape[1] != self.dims.token_dim:
            raise ValueError(f"token width {m.shape[1]} != configured {self.dims.token_dim}")
        x = self.block.forward(m)
        return self.head.apply(dm.mean_pool_rows(x))

    def _standardize(self, m: Tensor) -> Tensor:
        # raw embeddings are deliberately small; the attention arithmetic
        # expects unit-variance token features (the pretrained-backbone
        # regime), so standardize each token row without learned affine
        return dm.layer_norm_rows(m, self._unit_gain, self._zero_bias)

    def cross_attention(self, m_src: Tensor, m_tgt: Tensor) -> tuple[Tensor, np.ndarray]:
        """Source-queried attention over target tokens.

        Returns the normalized token matrix and the attention weights (one
        row per source token, rows summing to 1). Token streams are
        standardized so similarity logits have usable spread; the attended
        content joins the source stream as a residual and runs through the
        text block's own FFN and layer norms, so the output stays aligned
        with the source side while reading mostly the reliably-translated
        target tokens.
        """
        dw = self.dims.token_dim
        if m_src.shape[1] != dw or m_tgt.shape[1] != dw:
            raise ValueError("cross_attention operands must have the text width")
        zq = self._standardize(m_src)
        zk = self._standardize(m_tgt)
        q = dm.matmul(zq, self.cross_wq)
        k = dm.matmul(zk, self.cross_wk)
        v = dm.matmul(zk, self.cross_wv)
        weights = dm.softmax_rows(dm.scale(dm.matmul(q, dm.transpose(k)), 1.0 / math.sqrt(dw)))
        h = dm.matmul(weights, v)
        return self.block.post_attention(zq, h), weights.values

    def pool_project(self, h: Tensor) -> Tensor:
        return self.head.apply(dm.mean_pool_rows(h))

    def named_tensors(self) -> dict[str, Tensor]:
        named = {"text.tok_table": self.tok_table, "text.pos_table": self.pos_table}
        named.update(self.block.named_tensors("text.block"))
        named["text.cross.wq"] = self.cross_wq
        named["text.cross.wk"] = self.cross_wk
        named["text.cross.wv"] = self.cross_wv
        named.update(self.head.named_tensors("text.head"))
        return named


class Model:
    """All encoder parameters; construction order fixes the seeded init."""

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        dims.validate()
        self.dims = dims
        self.visual = VisualEncoder(dims, rng)
        self.text = TextEncoder(dims, rng)

    def named_tensors(self) -> dict[str, Tensor]:
        named = self.visual.named_tensors()
        named.update(self.text.named_tensors())
        return named

    def parameter_count(self) -> int:
        return sum(t.values.size for t in self.named_tensors().values())


# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------


def embed_tokens(seq: TokenSequence, model: Model) -> Tensor:
    return model.text.embed(seq)


def encode_text(m: Tensor, model: Model) -> Tensor:
    """Common-space embedding of a token matrix; one function for both languages."""
    return model.text.encode_from_tokens(m)


def encode_video(frames, model: Model) -> Tensor:
    if isinstance(frames, FrameFeatureSequence):
        frames = Tensor(frames.features)
    return model.visual.encode(frames)


def cross_attend(m_src: Tensor, m_tgt: Tensor, model: Model) -> Tensor:
    h, _ = model.text.cross_attention(m_src, m_tgt)
    return h


def pool_project_teacher(h: Tensor, model: Model) -> Tensor:
    return model.text.pool_project(h)
