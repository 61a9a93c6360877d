"""Lloyd's k-means over frame vectors.

Produces the frame cluster targets consumed by continued pretraining and
the coarse centroids behind the approximate nearest-neighbor index.
Fitting runs in float64 so the recorded inertia history is truly
non-increasing; returned centroids are float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .featurestore import FeatureStore

KMEANS_MAGIC = b"AWK1"


@dataclass(frozen=True)
class Centroids:
    centers: np.ndarray  # k x D float32
    inertia_history: tuple

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def _sq_dists_to(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = points - center
    return np.einsum("nd,nd->n", diff, diff)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=points.dtype)
    first = int(rng.integers(n))
    centers[0] = points[first]
    closest = _sq_dists_to(points, centers[0])
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining mass on already-chosen points; pick any unused one
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = points[idx]
        closest = np.minimum(closest, _sq_dists_to(points, centers[j]))
    return centers


def _assign_labels(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # argmin via the ||c||^2 - 2 x.c expansion (the ||x||^2 term is constant
    # per point); distances recomputed directly so exact matches give 0
    cross = points @ centers.T
    c_norms = np.einsum("kd,kd->k", centers, centers)
    labels = np.argmin(c_norms[None, :] - 2.0 * cross, axis=1)
    diff = points - centers[labels]
    return labels, np.einsum("nd,nd->n", diff, diff)


def _lloyd_update(points: np.ndarray, labels: np.ndarray, dists: np.ndarray,
                  k: int) -> np.ndarray:
    """One centroid update: cluster means, empty clusters re-seeded to the
    point currently farthest from its centroid."""
    centers = np.zeros((k, points.shape[1]), dtype=points.dtype)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    np.add.at(centers, labels, points)
    nonempty = counts > 0
    centers[nonempty] /= counts[nonempty, None]
    dists = dists.copy()
    for j in np.flatnonzero(~nonempty):
        far = int(np.argmax(dists))
        centers[j] = points[far]
        dists[far] = 0.0  # consecutive repairs pick distinct points
    return centers


def fit_kmeans(
    frames: np.ndarray,
    k: int,
    max_iters: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
) -> Centroids:
    """k-means++ seeded Lloyd iterations until relative centroid shift < tol.

    An update is only accepted if it does not increase inertia, so the
    recorded history is non-increasing even when float rounding of cluster
    means would regress it by epsilon. Deterministic for a given seed.
    With fewer distinct points than k, duplicate centroids can remain and
    their clusters stay empty; with continuous data this does not occur.
    """
    points = np.asarray(frames, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"expected N x D matrix, got shape {points.shape}")
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)

    centers = _plusplus_init(points, k, rng)
    labels, dists = _assign_labels(points, centers)
    history = [float(dists.sum())]
    scale = float(np.sqrt(np.mean(np.einsum("nd,nd->n", points, points)))) or 1.0
    for _ in range(max_iters):
        new_centers = _lloyd_update(points, labels, dists, k)
        new_labels, new_dists = _assign_labels(points, new_centers)
        inr = float(new_dists.sum())
        if inr > history[-1]:
            break
        shift = float(np.sqrt(np.max(np.einsum("kd,kd->k", centers - new_centers,
                                               centers - new_centers))))
        centers, labels, dists = new_centers, new_labels, new_dists
        history.append(inr)
        if shift < tol * scale or inr == history[-2]:
            break
    hist = tuple(history)
    for a, b in zip(hist, hist[1:]):
        assert b <= a, f"inertia increased: {a} -> {b}"
    return Centroids(centers=centers.astype(np.float32), inertia_history=hist)


def assign(centroids: Centroids, frames: np.ndarray) -> np.ndarray:
    """Per-frame nearest centroid by Euclidean distance, ties to lowest index."""
    points = np.asarray(frames, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != centroids.dim:
        raise ValueError(
            f"dim mismatch: frames have shape {points.shape}, centroids D={centroids.dim}"
        )
    labels, _ = _assign_labels(points, centroids.centers.astype(np.float64))
    return labels


def inertia(centroids: Centroids, frames: np.ndarray) -> float:
    points = np.asarray(frames, dtype=np.float64)
    _, dists = _assign_labels(points, centroids.centers.astype(np.float64))
    return float(dists.sum())


def sample_frames(store: FeatureStore, fraction: float = 0.1, seed: int = 0) -> np.ndarray:
    """Uniformly subsample frames across all utterances for fitting.

    Fitting on every frame of a long corpus buys nothing; a seeded fraction
    is enough and keeps the fit deterministic.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    chunks = []
    for utt_id in store.utt_ids:
        frames = store.get_utterance(utt_id)
        n = frames.shape[0]
        take = max(1, int(round(n * fraction)))
        idx = np.sort(rng.choice(n, size=take, replace=False))
        chunks.append(np.asarray(frames[idx], dtype=np.float64))
    return np.concatenate(chunks, axis=0)


def export_targets(store: FeatureStore, centroids: Centroids, path) -> None:
    """Write one line per utterance: utt_id TAB space-separated frame labels."""
    if centroids.dim != store.dim:
        raise ValueError(f"dim mismatch: store D={store.dim}, centroids D={centroids.dim}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for utt_id in store.utt_ids:
            labels = assign(centroids, store.get_utterance(utt_id))
            f.write(utt_id + "\t" + " ".join(str(int(x)) for x in labels) + "\n")


def save_centroids(centroids: Centroids, path) -> None:
    with open(path, "wb") as f:
        f.write(KMEANS_MAGIC)
        f.write(struct.pack("<II", centroids.k, centroids.dim))
        f.write(np.ascontiguousarray(centroids.centers, dtype="<f4").tobytes())


def load_centroids(path) -> Centroids:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != KMEANS_MAGIC:
            raise ValueError(f"{path}: unrecognized centroid checkpoint")
        k, dim = struct.unpack("<II", f.read(8))
        data = f.read(k * dim * 4)
        if len(data) != k * dim * 4:
            raise ValueError(f"{path}: truncated centroid payload")
    centers = np.frombuffer(data, dtype="<f4").reshape(k, dim).copy()
    return Centroids(centers=centers, inertia_history=())
