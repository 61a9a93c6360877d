"""Same-different word discrimination scoring.

Every test word segment is pooled into an AWE, all segment pairs are
scored by cosine, and the ranked pair list is summarized as average
precision: pairs sorted by (score descending, pair id ascending), then
precision averaged at the rank of each same-word pair. An area-under-ROC
figure is reported alongside for comparison; the headline `map` field is
the average precision.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .featurestore import FeatureStore, SegmentRef, WordSegment, seconds_to_segment
from .pooling import PoolerParams, forward_segments, mean_pool

NORM_FLOOR = 1e-12


@dataclass
class EvalItem:
    awe: np.ndarray
    word: str
    speaker_id: str
    seg: SegmentRef


@dataclass
class EvalReport:
    map: float
    n_items: int
    n_pairs: int
    n_positive_pairs: int
    auc_roc: float
    options: dict = field(default_factory=dict)

    def machine_line(self) -> str:
        return (
            f"map={self.map:.6f} n_items={self.n_items} "
            f"n_pairs={self.n_pairs} n_pos={self.n_positive_pairs}"
        )

    def human_text(self) -> str:
        lines = [
            "same-different word discrimination",
            f"  items           : {self.n_items}",
            f"  pairs scored    : {self.n_pairs}",
            f"  positive pairs  : {self.n_positive_pairs}",
            f"  MAP (avg prec)  : {self.map:.4f}",
            f"  AUC-ROC         : {self.auc_roc:.4f}",
        ]
        for key in sorted(self.options):
            lines.append(f"  option {key} = {self.options[key]}")
        return "\n".join(lines)


def collect_eval_awes(
    store: FeatureStore,
    segments: list[WordSegment],
    pooling="mean",
) -> tuple[list[EvalItem], int]:
    """Pool every word segment; returns (items, n_dropped).

    `pooling` is "mean" or PoolerParams. With a pooler, segments shorter
    than the conv kernel (or longer than its position table) cannot be
    embedded and are dropped, reported via the second return value.
    """
    refs = []
    for seg in segments:
        start_f, end_f = seconds_to_segment(seg.start_s, seg.end_s, store.frame_period_ms)
        total = store.n_frames(seg.utt_id)
        if end_f == total + 1 and start_f < total:
            end_f = total  # ceil widening may overshoot the last frame by one
        refs.append(SegmentRef(seg.utt_id, start_f, end_f))

    if isinstance(pooling, str):
        if pooling != "mean":
            raise ValueError(f"unknown pooling '{pooling}'")
        items = [
            EvalItem(awe=mean_pool(store.get_frames(ref)), word=seg.word,
                     speaker_id=seg.speaker_id, seg=ref)
            for seg, ref in zip(segments, refs)
        ]
        return items, 0

    params: PoolerParams = pooling
    cfg = params.config
    kept, kept_refs, dropped = [], [], 0
    for seg, ref in zip(segments, refs):
        if ref.n_frames < cfg.conv_kernel or cfg.conv_out_len(ref.n_frames) > cfg.max_positions:
            dropped += 1
            continue
        kept.append(seg)
        kept_refs.append(ref)
    frames = [np.asarray(store.get_frames(r), dtype=params.dtype) for r in kept_refs]
    awes, _ = forward_segments(params, frames)
    items = [
        EvalItem(awe=np.asarray(awes[i], dtype=np.float32), word=s.word,
                 speaker_id=s.speaker_id, seg=r)
        for i, (s, r) in enumerate(zip(kept, kept_refs))
    ]
    return items, dropped


def _cosine_matrix(awes: np.ndarray, n_workers: int = 1) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(awes, axis=1), NORM_FLOOR)
    unit = awes / norms[:, None]
    if n_workers <= 1 or unit.shape[0] < 256:
        return unit @ unit.T
    blocks = np.array_split(np.arange(unit.shape[0]), n_workers)
    out = np.empty((unit.shape[0], unit.shape[0]), dtype=unit.dtype)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(lambda b=b: unit[b] @ unit.T) for b in blocks]
        for block, fut in zip(blocks, futures):
            out[block] = fut.result()
    return out


def samediff_map(
    items: list[EvalItem],
    cross_speaker_only: bool = False,
    n_workers: int = 1,
) -> EvalReport:
    """Average precision of the cosine-ranked pair list.

    All unordered item pairs are scored (optionally only cross-speaker
    pairs); a pair is positive iff its words match. Ties in score break by
    canonical pair id so results are exactly deterministic. Worker count
    affects only how score blocks are computed, never the result.
    """
    n = len(items)
    if n < 2:
        raise ValueError(f"need at least 2 items, got {n}")
    awes = np.stack([np.asarray(it.awe, dtype=np.float64) for it in items])
    cos = _cosine_matrix(awes, n_workers=n_workers)
    ii, jj = np.triu_indices(n, k=1)
    if cross_speaker_only:
        speakers = np.array([it.speaker_id for it in items])
        keep = speakers[ii] != speakers[jj]
        ii, jj = ii[keep], jj[keep]
    if ii.size == 0:
        raise ValueError("no pairs to score")
    words = np.array([it.word for it in items])
    labels = words[ii] == words[jj]
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no positive pairs")
    scores = cos[ii, jj]

    order = np.lexsort((jj, ii, -scores))
    ranked_labels = labels[order]
    ranks = np.arange(1, ranked_labels.size + 1)
    cum_pos = np.cumsum(ranked_labels)
    ap = float((cum_pos[ranked_labels] / ranks[ranked_labels]).mean())

    # Mann-Whitney AUC with midranks for ties
    all_ranks = rankdata(scores, method="average")
    auc = float(
        (all_ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0)
        / (n_pos * (scores.size - n_pos))
    ) if n_pos < scores.size else 1.0

    return EvalReport(
        map=ap,
        n_items=n,
        n_pairs=int(ii.size),
        n_positive_pairs=n_pos,
        auc_roc=auc,
        options={"cross_speaker_only": cross_speaker_only},
    )


def brute_force_map(items: list[EvalItem]) -> float:
    """Test oracle: naive quadratic AP with the same tie rule.

    Plain per-pair cosines, a python sort, and a running precision sum;
    desk scale only.
    """
    n = len(items)
    if n < 2:
        raise ValueError(f"need at least 2 items, got {n}")
    scored = []
    for i, j in itertools.combinations(range(n), 2):
        a = np.asarray(items[i].awe, dtype=np.float64)
        b = np.asarray(items[j].awe, dtype=np.float64)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < NORM_FLOOR or nb < NORM_FLOOR:
            score = 0.0
        else:
            score = float(np.dot(a / na, b / nb))
        scored.append((score, (i, j), items[i].word == items[j].word))
    scored.sort(key=lambda rec: (-rec[0], rec[1]))
    n_pos = sum(1 for rec in scored if rec[2])
    if n_pos == 0:
        raise ValueError("no positive pairs")
    hits, total = 0, 0.0
    for rank, rec in enumerate(scored, start=1):
        if rec[2]:
            hits += 1
            total += hits / rank
    return total / n_pos
