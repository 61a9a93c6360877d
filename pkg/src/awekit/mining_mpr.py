"""Positive-pair mining from phone alignments.

Every contiguous run of 2..5 phones (configurable) becomes an n-gram
occurrence keyed by its phone sequence; two occurrences with the same key
form a positive pair. Silence labels break runs and never appear in keys.
Per-key occurrence counts can be capped by uniform subsampling before pair
enumeration.

Indexing plus mining is linear in occurrences plus emitted pairs; no
all-vs-all segment comparison happens anywhere on this path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .featurestore import PhoneAlignment, SegmentRef, seconds_to_segment
from .pairs import PairSet

DEFAULT_SILENCE_LABELS = frozenset({"sil", "sp", "spn", "nsn"})
KEY_SEPARATOR = "|"


@dataclass(frozen=True)
class NgramOccurrence:
    seg: SegmentRef
    key: str
    n: int
    speaker_id: str
    start_s: float
    end_s: float


def extract_ngrams(
    alignment: PhoneAlignment,
    n_min: int = 2,
    n_max: int = 5,
    frame_period_ms: float = 20.0,
    silence_labels: frozenset = DEFAULT_SILENCE_LABELS,
) -> list[NgramOccurrence]:
    """All n-gram occurrences of one utterance, for n in [n_min, n_max]."""
    if n_min < 1 or n_max < n_min:
        raise ValueError(f"invalid n-gram range [{n_min}, {n_max}]")
    occurrences: list[NgramOccurrence] = []
    run: list[tuple[float, float, str]] = []

    def flush_run():
        length = len(run)
        for n in range(n_min, min(n_max, length) + 1):
            for lo in range(length - n + 1):
                window = run[lo : lo + n]
                start_s, end_s = window[0][0], window[-1][1]
                start_f, end_f = seconds_to_segment(start_s, end_s, frame_period_ms)
                occurrences.append(
                    NgramOccurrence(
                        seg=SegmentRef(alignment.utt_id, start_f, end_f),
                        key=KEY_SEPARATOR.join(p for _, _, p in window),
                        n=n,
                        speaker_id=alignment.speaker_id,
                        start_s=start_s,
                        end_s=end_s,
                    )
                )
        run.clear()

    for entry in alignment.entries:
        if entry[2] in silence_labels:
            flush_run()
        else:
            run.append(entry)
    flush_run()
    return occurrences


def index_ngrams(occurrences: list[NgramOccurrence]) -> dict:
    """Group occurrences by key; per-key lists in canonical segment order."""
    index: dict[str, list[NgramOccurrence]] = {}
    for occ in occurrences:
        index.setdefault(occ.key, []).append(occ)
    for occs in index.values():
        occs.sort(key=lambda o: o.seg)
    return index


def _overlaps(a: SegmentRef, b: SegmentRef) -> bool:
    return a.utt_id == b.utt_id and a.start_frame < b.end_frame and b.start_frame < a.end_frame


def mine_pairs(
    index: dict,
    max_instances_per_type: int = 300,
    seed: int = 0,
    exclude_overlap: bool = True,
) -> PairSet:
    """Emit all unordered same-key occurrence pairs, capping instances.

    Keys holding more occurrences than the cap are uniformly subsampled
    (without replacement, seeded); a cap of 0 means unlimited. Overlapping
    same-utterance occurrences make degenerate positives and are skipped
    unless exclude_overlap is off. Deterministic for a given seed.
    """
    cap = max_instances_per_type
    if cap != 0 and cap < 2:
        raise ValueError("max_instances_per_type must be 0 (unlimited) or >= 2")
    rng = np.random.default_rng(seed)
    pairs = []
    for key in sorted(index):
        occs = index[key]
        if cap and len(occs) > cap:
            chosen = rng.choice(len(occs), size=cap, replace=False)
            occs = [occs[i] for i in np.sort(chosen)]
        for a, b in itertools.combinations(occs, 2):
            if a.seg == b.seg:
                continue
            if exclude_overlap and _overlaps(a.seg, b.seg):
                continue
            pairs.append((a.seg, b.seg, key))
    return PairSet(pairs=pairs, provenance="mpr")


def brute_force_pairs(occurrences: list[NgramOccurrence]) -> PairSet:
    """Test oracle: quadratic scan comparing every occurrence pair, no cap.

    Materializes all i < j key comparisons rather than grouping, keeping
    this path independent of the indexed miner. Desk scale only.
    """
    n = len(occurrences)
    if n == 0:
        return PairSet(pairs=[], provenance="ground_truth")
    codes = np.unique([o.key for o in occurrences], return_inverse=True)[1]
    ii, jj = np.triu_indices(n, k=1)
    matched = codes[ii] == codes[jj]
    pairs = []
    for i, j in zip(ii[matched], jj[matched]):
        a, b = occurrences[i], occurrences[j]
        if a.seg == b.seg:
            continue
        if a.seg <= b.seg:
            pairs.append((a.seg, b.seg, a.key))
        else:
            pairs.append((b.seg, a.seg, a.key))
    return PairSet(pairs=pairs, provenance="ground_truth")
