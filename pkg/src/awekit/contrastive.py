"""Contrastive training of the learned pooler on mined positive pairs.

The loss pulls an anchor AWE toward its positive and pushes it from
in-batch negatives, with cosine scores scaled by a temperature. Two
denominator conventions are supported:

* "standard": the positive term appears in the denominator alongside the
  negatives (the usual normalized temperature-scaled cross entropy).
* "literal": the denominator sums over the negative set only.

Negatives for a slot are all other slots' AWEs (anchors and positives)
whose key differs from the slot's key, so colliding keys never push
against each other. The upstream features stay fixed; only pooler
parameters receive gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .featurestore import FeatureStore, SegmentRef
from .pairs import PairSet
from .pooling import (
    PoolerParams,
    forward_segments,
    pooler_backward_batch,
    zeros_like_params,
)

NORM_FLOOR = 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; zero vectors compare as 0."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _ntxent_from_cosines(cos_pos: float, cos_negs: np.ndarray, tau: float,
                         mode: str):
    """Loss and its derivatives w.r.t. the cosine scores.

    Uses log-sum-exp so any cosines in [-1, 1] stay finite down to very
    small temperatures. Returns (loss, dloss/dcos_pos, dloss/dcos_negs).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if mode not in ("standard", "literal"):
        raise ValueError(f"unknown denominator mode '{mode}'")
    cos_negs = np.asarray(cos_negs, dtype=np.float64)
    if cos_negs.size == 0:
        raise ValueError("empty negative set")
    s_pos = cos_pos / tau
    s_negs = cos_negs / tau
    if mode == "standard":
        logits = np.concatenate(([s_pos], s_negs))
        m = logits.max()
        exps = np.exp(logits - m)
        lse = m + np.log(exps.sum())
        loss = lse - s_pos
        softmax = exps / exps.sum()
        d_pos = (softmax[0] - 1.0) / tau
        d_negs = softmax[1:] / tau
    else:
        m = s_negs.max()
        exps = np.exp(s_negs - m)
        lse = m + np.log(exps.sum())
        loss = lse - s_pos
        d_pos = -1.0 / tau
        d_negs = (exps / exps.sum()) / tau
    return float(loss), float(d_pos), d_negs


def ntxent_loss(anchor, positive, negatives, tau: float = 0.07,
                mode: str = "standard") -> float:
    cos_negs = np.array([cosine(anchor, neg) for neg in negatives])
    loss, _, _ = _ntxent_from_cosines(cosine(anchor, positive), cos_negs, tau, mode)
    return loss


def _cosine_grads(a: np.ndarray, b: np.ndarray):
    """d cos(a, b) w.r.t. a and b; zero under the small-norm guard."""
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return np.zeros_like(a), np.zeros_like(b)
    cos = float(np.dot(a, b) / (na * nb))
    da = b / (na * nb) - cos * a / (na * na)
    db = a / (na * nb) - cos * b / (nb * nb)
    return da, db


def ntxent_grad(anchor, positive, negatives, tau: float = 0.07,
                mode: str = "standard") -> dict:
    """Exact gradient of ntxent_loss w.r.t. every input AWE.

    Returns {"anchor": g, "positive": g, "negatives": [g, ...]}.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    negatives = [np.asarray(n, dtype=np.float64) for n in negatives]
    cos_negs = np.array([cosine(anchor, n) for n in negatives])
    _, d_pos, d_negs = _ntxent_from_cosines(cosine(anchor, positive), cos_negs, tau, mode)

    d_anchor = np.zeros_like(anchor)
    da, db = _cosine_grads(anchor, positive)
    d_anchor += d_pos * da
    d_positive = d_pos * db
    d_neg_list = []
    for weight, neg in zip(d_negs, negatives):
        da, db = _cosine_grads(anchor, neg)
        d_anchor += weight * da
        d_neg_list.append(weight * db)
    return {"anchor": d_anchor, "positive": d_positive, "negatives": d_neg_list}


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.07
    batch_size: int = 150
    epochs: int = 5
    max_iterations_per_epoch: int = 1000
    learning_rate: float = 1e-4
    seed: int = 0
    denominator_mode: str = "standard"
    clip_norm: float | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.denominator_mode not in ("standard", "literal"):
            raise ValueError(f"unknown denominator mode '{self.denominator_mode}'")


@dataclass
class ContrastiveBatch:
    """One batch of (anchor, positive) slots sharing in-batch negatives."""

    anchors: list  # of (SegmentRef, key)
    positives: list  # of SegmentRef

    def __len__(self) -> int:
        return len(self.anchors)

    def keys(self) -> list:
        return [key for _, key in self.anchors]

    def negative_awe_indices(self, slot: int) -> list:
        """Indices into the 2B batch AWEs (anchors then positives) usable
        as negatives for `slot`: everything whose key differs."""
        b = len(self.anchors)
        key = self.anchors[slot][1]
        keys = self.keys()
        return [i for i in range(2 * b) if keys[i % b] != key]


def build_batches(pairs: PairSet, batch_size: int, seed: int = 0) -> list:
    """Deterministically shuffle pairs and cut them into batches.

    The final remainder forms a smaller batch (a lone slot is dropped
    since it can have no negatives). Fewer pairs than one batch yields a
    single smaller batch with a warning.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs.pairs))
    shuffled = [pairs.pairs[i] for i in order]
    if 0 < len(shuffled) < batch_size:
        warnings.warn(
            f"only {len(shuffled)} pairs for batch size {batch_size}; "
            "emitting a single smaller batch"
        )
    batches = []
    for lo in range(0, len(shuffled), batch_size):
        chunk = shuffled[lo : lo + batch_size]
        if len(chunk) < 2:
            break
        batches.append(
            ContrastiveBatch(
                anchors=[(a, key) for a, _, key in chunk],
                positives=[b for _, b, _ in chunk],
            )
        )
    return batches


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)  # of (step, epoch, loss)

    def append(self, step: int, epoch: int, loss: float) -> None:
        self.entries.append((step, epoch, loss))

    def __len__(self) -> int:
        return len(self.entries)

    def epoch_means(self) -> list:
        sums: dict[int, list] = {}
        for _, epoch, loss in self.entries:
            sums.setdefault(epoch, []).append(loss)
        return [float(np.mean(sums[e])) for e in sorted(sums)]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("step,epoch,loss\n")
            for step, epoch, loss in self.entries:
                f.write(f"{step},{epoch},{loss:.8f}\n")


def _batch_loss_and_awe_grads(awes: np.ndarray, keys: list, tau: float, mode: str):
    """Mean slot loss over a batch plus gradients w.r.t. every AWE.

    AWEs are laid out anchors first, positives second. Slots whose key
    leaves them without any in-batch negative are skipped. Fully
    vectorized: the per-slot softmax runs over a masked score matrix and
    gradients flow back through one weight matrix W (slots x AWEs).
    """
    n2, _ = awes.shape
    b = n2 // 2
    key_arr = np.array(keys)
    norms = np.maximum(np.linalg.norm(awes, axis=1), NORM_FLOOR)
    unit = awes / norms[:, None]
    cos = unit @ unit.T

    neg_mask = np.concatenate([key_arr, key_arr])[None, :] != key_arr[:, None]
    n_negs = neg_mask.sum(axis=1)
    valid = n_negs > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        return None, None, 0

    anchors_cos = cos[:b]  # slot i scored against every AWE
    s = anchors_cos / tau
    s_pos = s[np.arange(b), b + np.arange(b)]
    s_masked = np.where(neg_mask, s, -np.inf)
    m = np.max(s_masked, axis=1)
    m = np.where(valid, m, 0.0)
    exp_negs = np.exp(s_masked - m[:, None], where=neg_mask, out=np.zeros_like(s))
    neg_sum = exp_negs.sum(axis=1)
    lse_negs = m + np.log(np.maximum(neg_sum, 1e-300))

    if mode == "standard":
        total_lse = np.logaddexp(s_pos, lse_negs)
        losses = total_lse - s_pos
        w_pos = (np.exp(s_pos - total_lse) - 1.0) / tau
        w_negs = np.exp(s_masked - total_lse[:, None], where=neg_mask,
                        out=np.zeros_like(s)) / tau
    elif mode == "literal":
        losses = lse_negs - s_pos
        w_pos = np.full(b, -1.0 / tau)
        w_negs = np.exp(s_masked - lse_negs[:, None], where=neg_mask,
                        out=np.zeros_like(s)) / tau
    else:
        raise ValueError(f"unknown denominator mode '{mode}'")

    scale = 1.0 / n_valid
    w = np.where(neg_mask, w_negs, 0.0)
    w[np.arange(b), b + np.arange(b)] += w_pos
    w[~valid] = 0.0
    w *= scale
    loss = float(losses[valid].sum() * scale)

    # d cos(a_i, x_j)/d a_i = (u_j - c_ij u_i)/|a_i|
    # d cos(a_i, x_j)/d x_j = (u_i - c_ij u_j)/|x_j|
    d_awes = np.zeros_like(awes)
    row_dot = (w * anchors_cos).sum(axis=1)
    d_awes[:b] = (w @ unit - row_dot[:, None] * unit[:b]) / norms[:b, None]
    col_dot = (w * anchors_cos).sum(axis=0)
    d_awes += (w.T @ unit[:b] - col_dot[:, None] * unit) / norms[:, None]
    return loss, d_awes, n_valid


def _resolve_frames(store: FeatureStore, seg: SegmentRef, dtype) -> np.ndarray:
    return np.asarray(store.get_frames(seg), dtype=dtype)


def train_pooler(store: FeatureStore, pairs: PairSet, pooler: PoolerParams,
                 cfg: TrainConfig):
    """Adam-optimize the pooler on mined pairs with fixed input features.

    Runs epochs x min(#batches, max_iterations_per_epoch) optimizer steps
    and returns (trained params, per-step TrainLog). Deterministic for a
    given config seed.
    """
    params = PoolerParams(pooler.config, *[a.copy() for a in pooler.arrays()])
    theta = params.pack()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    log = TrainLog()
    master = np.random.default_rng(cfg.seed)
    step = 0
    frame_cache: dict[SegmentRef, np.ndarray] = {}

    def frames_for(seg: SegmentRef) -> np.ndarray:
        cached = frame_cache.get(seg)
        if cached is None:
            cached = _resolve_frames(store, seg, params.dtype)
            frame_cache[seg] = cached
        return cached

    for epoch in range(cfg.epochs):
        epoch_seed = int(master.integers(2**63))
        batches = build_batches(pairs, cfg.batch_size, seed=epoch_seed)
        for batch_no, batch in enumerate(batches[: cfg.max_iterations_per_epoch]):
            segs = [seg for seg, _ in batch.anchors] + list(batch.positives)
            frames = [frames_for(seg) for seg in segs]
            awes, groups = forward_segments(params, frames)
            loss, d_awes, n_valid = _batch_loss_and_awe_grads(
                awes, batch.keys(), cfg.temperature, cfg.denominator_mode
            )
            if n_valid == 0:
                warnings.warn(f"epoch {epoch} batch {batch_no}: no usable negatives, skipped")
                continue
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} batch {batch_no}: {loss}"
                )
            grad = zeros_like_params(params)
            grad_vec = grad.pack()
            for members, tape in groups:
                g = pooler_backward_batch(params, tape, d_awes[members])
                grad_vec += g.pack()
            if cfg.clip_norm is not None:
                gnorm = float(np.linalg.norm(grad_vec))
                if gnorm > cfg.clip_norm:
                    grad_vec *= cfg.clip_norm / gnorm

            step += 1
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad_vec
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad_vec * grad_vec
            m_hat = m / (1.0 - ADAM_BETA1**step)
            v_hat = v / (1.0 - ADAM_BETA2**step)
            theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            params = PoolerParams.unpack(params.config, theta.astype(params.dtype))
            log.append(step, epoch, float(loss))
    return params, log
