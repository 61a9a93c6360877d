"""Nearest-neighbor baseline for positive-pair mining.

Random speech segments are mean-pooled into vectors, indexed by an
inverted-file structure (coarse k-means cells, each holding the vectors
assigned to it), and each query's top-k neighbors under dot product become
positive pairs. Probing fewer cells than exist trades recall for speed;
probing all cells reproduces exact search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featurestore import FeatureStore, SegmentRef
from .kmeans import fit_kmeans
from .pairs import PairSet
from .pooling import mean_pool

KNN_KEY = "knn"


def sample_segments(
    store: FeatureStore,
    min_ms: float = 80.0,
    max_ms: float = 310.0,
    min_gap_ms: float = 80.0,
    seed: int = 0,
) -> list[SegmentRef]:
    """Greedy left-to-right random segment placement per utterance.

    Durations are drawn uniformly in [min_ms, max_ms] and widened to whole
    frames; consecutive segments in an utterance start at least the drawn
    duration plus min_gap_ms apart. Utterances too short for one segment
    contribute nothing.
    """
    if min_ms > max_ms:
        raise ValueError(f"min_ms {min_ms} exceeds max_ms {max_ms}")
    rng = np.random.default_rng(seed)
    period = store.frame_period_ms
    gap_frames = int(np.ceil(min_gap_ms / period))
    segments = []
    for utt_id in store.utt_ids:
        total = store.n_frames(utt_id)
        pos = 0
        while True:
            dur_ms = float(rng.uniform(min_ms, max_ms))
            dur_frames = max(1, int(np.ceil(dur_ms / period - 1e-9)))
            if pos + dur_frames > total:
                break
            segments.append(SegmentRef(utt_id, pos, pos + dur_frames))
            pos += dur_frames + gap_frames
    return segments


def embed_segments(store: FeatureStore, segments: list[SegmentRef]) -> np.ndarray:
    """Mean-pool each segment into one vector; rows follow input order."""
    out = np.empty((len(segments), store.dim), dtype=np.float32)
    for i, seg in enumerate(segments):
        out[i] = mean_pool(store.get_frames(seg))
    return out


def _scores(queries: np.ndarray, targets: np.ndarray, metric: str) -> np.ndarray:
    if metric == "dot":
        return queries @ targets.T
    if metric == "cosine":
        qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
        tn = targets / np.maximum(np.linalg.norm(targets, axis=1, keepdims=True), 1e-12)
        return qn @ tn.T
    raise ValueError(f"unknown metric '{metric}'")


@dataclass
class AnnIndex:
    centroids: np.ndarray  # nlist x H
    lists: list  # per centroid: int array of vector ids
    vectors: np.ndarray  # N x H
    segments: list  # of SegmentRef, parallel to vectors
    nprobe: int
    metric: str

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]


def build_ann_index(
    vectors: np.ndarray,
    segments: list[SegmentRef],
    nlist: int,
    nprobe: int,
    seed: int = 0,
    metric: str = "dot",
) -> AnnIndex:
    """Coarse k-means cells with each vector filed under its best centroid
    (by the query metric, so probing stays consistent with filing)."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if len(segments) != vectors.shape[0]:
        raise ValueError("segments and vectors must be parallel")
    if nlist > vectors.shape[0]:
        raise ValueError(f"nlist {nlist} exceeds vector count {vectors.shape[0]}")
    if not 1 <= nprobe <= nlist:
        raise ValueError(f"nprobe must be in [1, nlist], got {nprobe}")
    centroids = fit_kmeans(vectors, k=nlist, seed=seed).centers
    cell = np.argmax(_scores(vectors, centroids, metric), axis=1)
    lists = [np.flatnonzero(cell == j) for j in range(nlist)]
    return AnnIndex(centroids=centroids, lists=lists, vectors=vectors,
                    segments=list(segments), nprobe=nprobe, metric=metric)


def _rank_candidates(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((ids, -scores))
    return ids[order[:k]]


def ann_search(index: AnnIndex, query_ids: np.ndarray, k: int) -> list:
    """Top-k neighbor ids per query among probed cells, self excluded."""
    results = []
    queries = index.vectors[query_ids]
    cell_scores = _scores(queries, index.centroids, index.metric)
    probe_order = np.argsort(-cell_scores, axis=1, kind="stable")[:, : index.nprobe]
    for row, qid in enumerate(query_ids):
        candidates = np.concatenate([index.lists[c] for c in probe_order[row]])
        candidates = candidates[candidates != qid]
        if candidates.size == 0 or k == 0:
            results.append(np.empty(0, dtype=np.int64))
            continue
        scores = _scores(queries[row : row + 1], index.vectors[candidates],
                         index.metric)[0]
        results.append(_rank_candidates(scores, candidates, k))
    return results


def exact_search(
    vectors: np.ndarray,
    query_ids: np.ndarray,
    k: int,
    metric: str = "dot",
    block: int = 1024,
) -> list:
    """Exhaustive top-k scan (the oracle and the slow baseline).

    Scores every query against every vector in blocks; ordering is
    (score desc, id asc).
    """
    vectors = np.asarray(vectors, dtype=np.float32)
    n = vectors.shape[0]
    query_ids = np.asarray(query_ids)
    results = []
    for lo in range(0, len(query_ids), block):
        qids = query_ids[lo : lo + block]
        scores = _scores(vectors[qids], vectors, metric)
        scores[np.arange(len(qids)), qids] = -np.inf  # self
        if k == 0:
            results.extend(np.empty(0, dtype=np.int64) for _ in qids)
            continue
        kk = min(k, n - 1)
        if kk < n - 1:
            part = np.argpartition(-scores, kk, axis=1)[:, : kk + 1]
        else:
            part = np.tile(np.arange(n), (len(qids), 1))
        for row in range(len(qids)):
            ids = part[row]
            ids = ids[np.isfinite(scores[row, ids])]
            results.append(_rank_candidates(scores[row, ids], ids, kk))
    return results


def _pairs_from_neighbors(segments: list, query_ids, neighbor_lists) -> PairSet:
    seen = set()
    for qid, neighbors in zip(query_ids, neighbor_lists):
        for nid in neighbors:
            a, b = segments[int(qid)], segments[int(nid)]
            if a == b:
                continue
            seen.add((a, b) if a <= b else (b, a))
    pairs = [(a, b, KNN_KEY) for a, b in sorted(seen)]
    return PairSet(pairs=pairs, provenance="knn")


def knn_pairs(index: AnnIndex, query_ids=None, k: int = 5) -> PairSet:
    """Unordered deduplicated (query, neighbor) pairs from the ANN index."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if query_ids is None:
        query_ids = np.arange(index.vectors.shape[0])
    neighbors = ann_search(index, np.asarray(query_ids), k)
    return _pairs_from_neighbors(index.segments, query_ids, neighbors)


def exact_knn(
    vectors: np.ndarray,
    segments: list[SegmentRef],
    query_ids=None,
    k: int = 5,
    metric: str = "dot",
) -> PairSet:
    """Test oracle and timing baseline: exhaustive-search pair mining."""
    if query_ids is None:
        query_ids = np.arange(np.asarray(vectors).shape[0])
    neighbors = exact_search(vectors, np.asarray(query_ids), k, metric=metric)
    return _pairs_from_neighbors(list(segments), query_ids, neighbors)
