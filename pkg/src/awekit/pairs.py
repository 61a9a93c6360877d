"""Mined positive pairs and their on-disk TSV format.

One pair per line:

    uttA <TAB> startA_frame <TAB> endA_frame
    <TAB> uttB <TAB> startB_frame <TAB> endB_frame <TAB> key <TAB> provenance

Pairs are unordered; the stored order is canonical (lexicographic by
(utt_id, start_frame, end_frame)) so identical mining runs serialize to
identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

from .featurestore import SegmentRef

PROVENANCES = ("mpr", "knn", "ground_truth")


def canonical_pair(a: SegmentRef, b: SegmentRef, key: str) -> tuple:
    if a == b:
        raise ValueError(f"degenerate pair of identical segments: {a}")
    return (a, b, key) if a <= b else (b, a, key)


@dataclass
class PairSet:
    pairs: list  # of (SegmentRef, SegmentRef, key)
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance '{self.provenance}'")

    def __len__(self) -> int:
        return len(self.pairs)

    def as_set(self) -> set:
        return {(a, b, key) for a, b, key in self.pairs}


def write_pairs(pairset: PairSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for a, b, key in pairset.pairs:
            f.write(
                f"{a.utt_id}\t{a.start_frame}\t{a.end_frame}"
                f"\t{b.utt_id}\t{b.start_frame}\t{b.end_frame}"
                f"\t{key}\t{pairset.provenance}\n"
            )


def load_pairs(path) -> PairSet:
    pairs = []
    provenance = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                a = SegmentRef(parts[0], int(parts[1]), int(parts[2]))
                b = SegmentRef(parts[3], int(parts[4]), int(parts[5]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            key, prov = parts[6], parts[7]
            if provenance is None:
                provenance = prov
            elif provenance != prov:
                raise ValueError(f"{path}:{lineno}: mixed provenances in one file")
            pairs.append((a, b, key))
    if provenance is None:
        provenance = "ground_truth"
    return PairSet(pairs=pairs, provenance=provenance)
