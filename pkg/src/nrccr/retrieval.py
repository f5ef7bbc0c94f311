"""Common-space scoring and retrieval evaluation.

Queries in the target language are scored against videos with a fused
similarity: ``beta * cos(video, tgt_query) + (1 - beta) * cos(video,
src_query)`` where the source side is the channel-translated version of the
query. The video-to-text direction reuses the same fused matrix transposed
(configurable down to target-only). Metrics are R@{1,5,10}, median rank,
mAP and their SumR aggregate, plus a cross-lingual text-to-text mAP.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffmath as dm
from .corpus import Split
from .encoders import Model, TokenSequence

_LENGTH_BUCKETS = ((4, 5), (6, 7), (8, 9), (10, 12))


# ---------------------------------------------------------------------------
# ranking primitives
# ---------------------------------------------------------------------------


def rank_items(scores: np.ndarray) -> np.ndarray:
    """Item indices by descending score; ties break toward the smaller index."""
    scores = np.asarray(scores)
    if scores.ndim != 1 or scores.size < 1:
        raise ValueError("rank_items expects a nonempty score vector")
    return np.argsort(-scores, kind="stable")


def _first_relevant_ranks(rankings: Sequence[np.ndarray],
                          relevance: Sequence[set]) -> np.ndarray:
    if not rankings:
        raise ValueError("empty query set")
    ranks = np.empty(len(rankings))
    for qi, (order, rel) in enumerate(zip(rankings, relevance)):
        if not rel:
            raise ValueError(f"query {qi} has an empty relevance set")
        best = None
        for pos, item in enumerate(order, start=1):
            if int(item) in rel:
                best = pos
                break
        if best is None:
            raise ValueError(f"query {qi} has no relevant item in the index")
        ranks[qi] = best
    return ranks


def recall_at_k(rankings: Sequence[np.ndarray], relevance: Sequence[set], k: int) -> float:
    """Percentage of queries with a relevant item in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = _first_relevant_ranks(rankings, relevance)
    return 100.0 * float(np.count_nonzero(ranks <= k)) / len(ranks)


def median_rank(rankings: Sequence[np.ndarray], relevance: Sequence[set]) -> float:
    """Median over queries of the rank of the first relevant item."""
    return float(np.median(_first_relevant_ranks(rankings, relevance)))


def mean_average_precision(rankings: Sequence[np.ndarray],
                           relevance: Sequence[set]) -> float:
    """mAP as a percentage; AP averages precision at each relevant rank."""
    if not rankings:
        raise ValueError("empty query set")
    aps = []
    for qi, (order, rel) in enumerate(zip(rankings, relevance)):
        if not rel:
            raise ValueError(f"query {qi} has an empty relevance set")
        hits = 0
        precisions = []
        for pos, item in enumerate(order, start=1):
            if int(item) in rel:
                hits += 1
                precisions.append(hits / pos)
        if not precisions:
            raise ValueError(f"query {qi} has no relevant item in the index")
        aps.append(sum(precisions) / len(rel))
    return 100.0 * float(np.mean(aps))


def fuse_score(video_vec: np.ndarray, tgt_vec: np.ndarray,
               src_vec: Optional[np.ndarray], beta: float) -> float:
    """Eq.-style bilingual score fusion for a single (video, query) pair."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be within [0, 1]")
    def cos(a, b):
        na = max(float(np.linalg.norm(a)), 1e-12)
        nb = max(float(np.linalg.norm(b)), 1e-12)
        return float(np.dot(a, b)) / (na * nb)
    score = beta * cos(video_vec, tgt_vec)
    if beta < 1.0:
        if src_vec is None:
            raise ValueError("beta < 1 needs the translated source query")
        score += (1.0 - beta) * cos(video_vec, src_vec)
    return score


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class DirectionMetrics:
    r1: float
    r5: float
    r10: float
    medr: float
    map: float

    def to_dict(self) -> dict:
        return {"r1": self.r1, "r5": self.r5, "r10": self.r10,
                "medr": self.medr, "map": self.map}


@dataclass
class MetricsReport:
    t2v: DirectionMetrics
    v2t: DirectionMetrics
    sumr: float
    buckets: Optional[list[dict]] = None
    t2t_map: Optional[float] = None

    def to_dict(self) -> dict:
        out = {"t2v": self.t2v.to_dict(), "v2t": self.v2t.to_dict(), "sumr": self.sumr}
        if self.buckets is not None:
            out["buckets"] = self.buckets
        if self.t2t_map is not None:
            out["t2t"] = {"map": self.t2t_map}
        return out


def sum_recalls(report: MetricsReport) -> float:
    return (report.t2v.r1 + report.t2v.r5 + report.t2v.r10
            + report.v2t.r1 + report.v2t.r5 + report.v2t.r10)


def _direction_metrics(rankings: list[np.ndarray], relevance: list[set]) -> DirectionMetrics:
    return DirectionMetrics(
        r1=recall_at_k(rankings, relevance, 1),
        r5=recall_at_k(rankings, relevance, 5),
        r10=recall_at_k(rankings, relevance, 10),
        medr=median_rank(rankings, relevance),
        map=mean_average_precision(rankings, relevance))


# ---------------------------------------------------------------------------
# embedding the corpus
# ---------------------------------------------------------------------------


class ModelEmbedder:
    """Tape-free adapter from a trained model to plain embedding vectors."""

    def __init__(self, model: Model):
        self.model = model

    def embed_video(self, frames: np.ndarray) -> np.ndarray:
        return self.model.visual.encode(dm.Tensor(frames)).values

    def embed_text(self, seq: TokenSequence) -> np.ndarray:
        return self.model.text.encode_from_tokens(self.model.text.embed(seq)).values


def _as_embedder(model):
    if hasattr(model, "embed_video") and hasattr(model, "embed_text"):
        return model
    return ModelEmbedder(model)


@dataclass
class EmbeddingIndex:
    """Ordered embeddings for one split; row positions define item indices."""

    video_ids: list[str]
    videos: np.ndarray                 # n_videos x d
    caption_ids: list[str]
    tgt: np.ndarray                    # n_captions x d
    src: Optional[np.ndarray]          # n_captions x d, None when unused
    video_of_caption: np.ndarray       # n_captions, video row index
    query_lengths: np.ndarray          # n_captions, tgt token counts

    def __post_init__(self):
        if len(set(self.video_ids)) != len(self.video_ids):
            raise ValueError("duplicate video ids in index")
        if len(set(self.caption_ids)) != len(self.caption_ids):
            raise ValueError("duplicate caption ids in index")
        if self.videos.shape[0] != len(self.video_ids):
            raise ValueError("video matrix rows must match ids")
        if self.tgt.shape[0] != len(self.caption_ids):
            raise ValueError("caption matrix rows must match ids")


def build_index(model, split: Split, need_src: bool) -> EmbeddingIndex:
    embedder = _as_embedder(model)
    videos = split.videos()
    video_ids = list(videos)
    video_rows = np.stack([embedder.embed_video(videos[v].features) for v in video_ids])
    vpos = {v: i for i, v in enumerate(video_ids)}
    caption_ids, tgt_rows, src_rows, owners, lengths = [], [], [], [], []
    for inst in split.instances:
        caption_ids.append(inst.caption_id)
        tgt_rows.append(embedder.embed_text(inst.tgt))
        owners.append(vpos[inst.video_id])
        lengths.append(len(inst.tgt))
        if need_src:
            if inst.src is None:
                raise ValueError(
                    f"caption {inst.caption_id} lacks a translated source query")
            src_rows.append(embedder.embed_text(inst.src))
    return EmbeddingIndex(video_ids, video_rows, caption_ids, np.stack(tgt_rows),
                          np.stack(src_rows) if need_src else None,
                          np.asarray(owners), np.asarray(lengths))


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return dm.cosine_matrix(dm.Tensor(a), dm.Tensor(b)).values


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(model, split: Split, beta: float = 0.8, v2t_fusion: str = "fused",
             group_by_length: bool = False, with_t2t: bool = False) -> MetricsReport:
    """Score every caption against every video and assemble a MetricsReport.

    t2v treats each caption as a query with its own video relevant; v2t
    treats each video as a query with all of its captions relevant.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be within [0, 1]")
    if v2t_fusion not in ("fused", "target_only"):
        raise ValueError("v2t_fusion must be 'fused' or 'target_only'")
    if not split.instances:
        raise ValueError(f"split '{split.role}' is empty")
    need_src = beta < 1.0 or with_t2t
    index = build_index(model, split, need_src)

    sim_tgt = _cosine(index.tgt, index.videos)          # n_captions x n_videos
    if beta < 1.0:
        fused = beta * sim_tgt + (1.0 - beta) * _cosine(index.src, index.videos)
    else:
        fused = sim_tgt

    n_captions, n_videos = fused.shape
    t2v_rankings = [rank_items(fused[i]) for i in range(n_captions)]
    t2v_relevance = [{int(index.video_of_caption[i])} for i in range(n_captions)]
    t2v = _direction_metrics(t2v_rankings, t2v_relevance)

    v2t_matrix = fused.T if v2t_fusion == "fused" else sim_tgt.T
    captions_of_video: dict[int, set] = {}
    for ci, vi in enumerate(index.video_of_caption):
        captions_of_video.setdefault(int(vi), set()).add(ci)
    v2t_rankings = [rank_items(v2t_matrix[j]) for j in range(n_videos)]
    v2t_relevance = [captions_of_video[j] for j in range(n_videos)]
    v2t = _direction_metrics(v2t_rankings, v2t_relevance)

    report = MetricsReport(t2v=t2v, v2t=v2t, sumr=0.0)
    report.sumr = sum_recalls(report)

    if group_by_length:
        buckets = []
        for lo, hi in _LENGTH_BUCKETS:
            members = [i for i in range(n_captions)
                       if lo <= index.query_lengths[i] <= hi]
            entry = {"bucket": f"{lo}-{hi}", "count": len(members)}
            if members:
                entry["t2v_r5"] = recall_at_k([t2v_rankings[i] for i in members],
                                              [t2v_relevance[i] for i in members], 5)
            else:
                entry["t2v_r5"] = None
            buckets.append(entry)
        report.buckets = buckets

    if with_t2t:
        report.t2t_map = _text_to_text_map(index)
    return report


def _text_to_text_map(index: EmbeddingIndex) -> float:
    sims = _cosine(index.tgt, index.src)
    rankings = [rank_items(sims[i]) for i in range(sims.shape[0])]
    relevance = [{i} for i in range(sims.shape[0])]
    return mean_average_precision(rankings, relevance)


def evaluate_text_to_text(model, split: Split) -> float:
    """mAP of target-language queries retrieving their own channel-translated
    source-language counterparts (exactly one relevant item per query)."""
    if not split.instances:
        raise ValueError(f"split '{split.role}' is empty")
    index = build_index(model, split, need_src=True)
    return _text_to_text_map(index)


def write_ranking_dump(path, split: Split, model, beta: float = 0.8,
                       top_k: int = 10) -> None:
    """TSV dump of the top-k ranked videos per target-language query."""
    index = build_index(model, split, need_src=beta < 1.0)
    sim_tgt = _cosine(index.tgt, index.videos)
    if beta < 1.0:
        scores = beta * sim_tgt + (1.0 - beta) * _cosine(index.src, index.videos)
    else:
        scores = sim_tgt
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qi, caption_id in enumerate(index.caption_ids):
            order = rank_items(scores[qi])[:top_k]
            for rank, item in enumerate(order, start=1):
                fh.write(f"{caption_id}\t{rank}\t{index.video_ids[int(item)]}\t"
                         f"{scores[qi, int(item)]:.17g}\n")
