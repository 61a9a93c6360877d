"""Synthetic corpora with known word, phone and speaker structure.

Each phone type is a fixed unit prototype vector; a word is a fixed phone
sequence; an utterance concatenates words with silences around them. A
phone instance's frames are its prototype plus an additive per-speaker
offset plus per-frame Gaussian noise, with duration drawn per instance.
Alignments and word segments are exactly consistent with the emitted
frames, so mining, training and evaluation are verifiable end to end.

Not a speech synthesizer; a verification substrate with a controllable
gap between easy (no noise, no speaker shift) and hard.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featurestore import (
    FrameMatrix,
    PhoneAlignment,
    WordSegment,
    write_alignments,
    write_features,
    write_word_segments,
)
from .mining_mpr import extract_ngrams, index_ngrams, mine_pairs
from .pairs import PairSet, write_pairs

SILENCE_PHONE = "sil"


@dataclass(frozen=True)
class CorpusSpec:
    n_phone_types: int = 40
    n_word_types: int = 200
    phones_per_word: tuple = (3, 8)
    n_speakers: int = 8
    utterances_per_speaker: int = 30
    words_per_utterance: tuple = (4, 9)
    frames_per_phone: tuple = (3, 8)
    silence_frames: tuple = (2, 4)
    feature_dim: int = 32
    speaker_shift_scale: float = 0.25
    noise_scale: float = 0.3
    frame_period_ms: float = 20.0
    seed: int = 1234

    def __post_init__(self):
        counts = (self.n_phone_types, self.n_word_types, self.n_speakers,
                  self.utterances_per_speaker, self.feature_dim)
        if any(c < 1 for c in counts):
            raise ValueError("all corpus counts must be >= 1")
        for name in ("phones_per_word", "words_per_utterance",
                     "frames_per_phone", "silence_frames"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"impossible spec: {name} range ({lo}, {hi})")
        if self.speaker_shift_scale < 0 or self.noise_scale < 0:
            raise ValueError("scales must be non-negative")
        if self.frame_period_ms <= 0:
            raise ValueError("frame_period_ms must be positive")


@dataclass
class Corpus:
    spec: CorpusSpec
    records: list  # of FrameMatrix
    alignments: list  # of PhoneAlignment
    words: list  # of WordSegment
    lexicon: dict = field(repr=False)  # word -> tuple of phone ids


@dataclass(frozen=True)
class CorpusPaths:
    features: Path
    alignments: Path
    words: Path
    gt_pairs: Path


def _draw_range(rng, lohi) -> int:
    return int(rng.integers(lohi[0], lohi[1] + 1))


def build_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    dim = spec.feature_dim

    protos = rng.standard_normal((spec.n_phone_types, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    sil_proto = rng.standard_normal(dim)
    sil_proto /= np.linalg.norm(sil_proto)

    lexicon = {}
    for w in range(spec.n_word_types):
        length = _draw_range(rng, spec.phones_per_word)
        lexicon[f"word{w:03d}"] = tuple(
            int(p) for p in rng.integers(0, spec.n_phone_types, size=length)
        )
    word_names = sorted(lexicon)

    period_s = spec.frame_period_ms / 1000.0
    records, alignments, word_segs = [], [], []
    for s in range(spec.n_speakers):
        speaker_id = f"spk{s:02d}"
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        offset = spec.speaker_shift_scale * direction  # scale = offset norm
        for u in range(spec.utterances_per_speaker):
            utt_id = f"{speaker_id}u{u:03d}"
            n_words = _draw_range(rng, spec.words_per_utterance)
            chosen = [word_names[int(i)] for i in
                      rng.integers(0, spec.n_word_types, size=n_words)]
            chunks, entries = [], []
            frame_pos = 0

            def emit(proto, label, n_frames):
                nonlocal frame_pos
                noise = spec.noise_scale * rng.standard_normal((n_frames, dim))
                chunks.append(proto[None, :] + offset[None, :] + noise)
                start_s = frame_pos * period_s
                end_s = (frame_pos + n_frames) * period_s
                entries.append((round(start_s, 6), round(end_s, 6), label))
                frame_pos += n_frames

            emit(sil_proto, SILENCE_PHONE, _draw_range(rng, spec.silence_frames))
            for word in chosen:
                word_start_s = frame_pos * period_s
                for pid in lexicon[word]:
                    emit(protos[pid], f"p{pid:02d}", _draw_range(rng, spec.frames_per_phone))
                word_segs.append(
                    WordSegment(utt_id=utt_id, start_s=round(word_start_s, 6),
                                end_s=round(frame_pos * period_s, 6),
                                word=word, speaker_id=speaker_id)
                )
                emit(sil_proto, SILENCE_PHONE, _draw_range(rng, spec.silence_frames))

            frames = np.concatenate(chunks).astype(np.float32)
            records.append(FrameMatrix(utt_id, frames, spec.frame_period_ms))
            alignments.append(
                PhoneAlignment(utt_id=utt_id, entries=tuple(entries),
                               speaker_id=speaker_id)
            )
    return Corpus(spec=spec, records=records, alignments=alignments,
                  words=word_segs, lexicon=lexicon)


def ground_truth_pairs(corpus: Corpus, n_min: int = 2, n_max: int = 5) -> PairSet:
    """All capless same-phone-sequence pairs over the corpus alignments."""
    occurrences = []
    for ali in corpus.alignments:
        occurrences.extend(
            extract_ngrams(ali, n_min, n_max, corpus.spec.frame_period_ms)
        )
    mined = mine_pairs(index_ngrams(occurrences), max_instances_per_type=0,
                       exclude_overlap=False)
    return PairSet(pairs=mined.pairs, provenance="ground_truth")


def generate_corpus(spec: CorpusSpec, out_dir) -> CorpusPaths:
    """Build a corpus and write its four files into out_dir.

    Deterministic: identical specs produce byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = build_corpus(spec)
    paths = CorpusPaths(
        features=out_dir / "features.awf",
        alignments=out_dir / "alignments.tsv",
        words=out_dir / "words.tsv",
        gt_pairs=out_dir / "pairs_gt.tsv",
    )
    write_features(corpus.records, paths.features)
    write_alignments(corpus.alignments, paths.alignments)
    write_word_segments(corpus.words, paths.words)
    write_pairs(ground_truth_pairs(corpus), paths.gt_pairs)
    return paths


def split_utterances(utt_ids: list, test_every: int = 5) -> tuple[list, list]:
    """Deterministic train/test split: every test_every-th utterance of the
    sorted id list goes to test. Balanced across speakers when ids sort by
    speaker then index, as generated here."""
    ordered = sorted(utt_ids)
    train, test = [], []
    for i, utt in enumerate(ordered):
        (test if i % test_every == test_every - 1 else train).append(utt)
    return train, test
