import numpy as np
import pytest

from awekit.featurestore import (
    load_alignments,
    load_word_segments,
    open_features,
    seconds_to_segment,
)
from awekit.mining_mpr import brute_force_pairs, extract_ngrams
from awekit.pairs import load_pairs
from awekit.synthcorpus import (
    CorpusSpec,
    build_corpus,
    generate_corpus,
    split_utterances,
)

SMALL = CorpusSpec(
    n_phone_types=12,
    n_word_types=20,
    phones_per_word=(2, 5),
    n_speakers=3,
    utterances_per_speaker=6,
    words_per_utterance=(2, 5),
    frames_per_phone=(2, 6),
    feature_dim=8,
    seed=42,
)


class TestGeneration:
    def test_deterministic_files(self, tmp_path):
        p1 = generate_corpus(SMALL, tmp_path / "a")
        p2 = generate_corpus(SMALL, tmp_path / "b")
        for f1, f2 in zip(
            (p1.features, p1.alignments, p1.words, p1.gt_pairs),
            (p2.features, p2.alignments, p2.words, p2.gt_pairs),
        ):
            assert f1.read_bytes() == f2.read_bytes()

    def test_degenerate_noise_free_phones_identical(self):
        spec = CorpusSpec(
            n_phone_types=5, n_word_types=6, phones_per_word=(2, 3),
            n_speakers=2, utterances_per_speaker=3, words_per_utterance=(2, 3),
            frames_per_phone=(2, 3), feature_dim=6,
            speaker_shift_scale=0.0, noise_scale=0.0, seed=7,
        )
        corpus = build_corpus(spec)
        by_phone = {}
        for record, ali in zip(corpus.records, corpus.alignments):
            for start_s, end_s, phone in ali.entries:
                s, e = seconds_to_segment(start_s, end_s, spec.frame_period_ms)
                for row in record.frames[s:e]:
                    by_phone.setdefault(phone, []).append(row)
        for phone, rows in by_phone.items():
            stacked = np.stack(rows)
            assert np.all(stacked == stacked[0]), phone

    def test_alignment_covers_all_frames(self, tmp_path):
        paths = generate_corpus(SMALL, tmp_path)
        store = open_features(paths.features)
        for ali in load_alignments(paths.alignments):
            total = store.n_frames(ali.utt_id)
            assert ali.entries[0][0] == 0.0
            _, end = seconds_to_segment(
                ali.entries[-1][0], ali.entries[-1][1], SMALL.frame_period_ms
            )
            assert end == total
            # each utterance alternates sil and word phones with no gaps
            for (s0, e0, _), (s1, e1, _) in zip(ali.entries, ali.entries[1:]):
                assert e0 == pytest.approx(s1, abs=1e-9)

    def test_word_spans_match_phone_spans(self, tmp_path):
        paths = generate_corpus(SMALL, tmp_path)
        alignments = {a.utt_id: a for a in load_alignments(paths.alignments)}
        for word in load_word_segments(paths.words):
            ali = alignments[word.utt_id]
            inside = [
                e for e in ali.entries
                if e[0] >= word.start_s - 1e-9 and e[1] <= word.end_s + 1e-9
            ]
            assert inside, word
            assert inside[0][0] == pytest.approx(word.start_s, abs=1e-9)
            assert inside[-1][1] == pytest.approx(word.end_s, abs=1e-9)
            assert all(e[2] != "sil" for e in inside)

    def test_phone_count_per_utterance(self):
        corpus = build_corpus(SMALL)
        words_by_utt = {}
        for w in corpus.words:
            words_by_utt.setdefault(w.utt_id, []).append(w.word)
        for ali in corpus.alignments:
            utt_words = words_by_utt[ali.utt_id]
            expected_phones = sum(len(corpus.lexicon[w]) for w in utt_words)
            expected_sils = len(utt_words) + 1
            assert len(ali.entries) == expected_phones + expected_sils

    def test_gt_pairs_equal_brute_force(self, tmp_path):
        paths = generate_corpus(SMALL, tmp_path)
        corpus = build_corpus(SMALL)
        occurrences = []
        for ali in corpus.alignments:
            occurrences.extend(extract_ngrams(ali, 2, 5, SMALL.frame_period_ms))
        brute = brute_force_pairs(occurrences)
        from_file = load_pairs(paths.gt_pairs)
        assert from_file.as_set() == brute.as_set()
        assert from_file.provenance == "ground_truth"

    def test_impossible_spec(self):
        with pytest.raises(ValueError, match="impossible spec"):
            CorpusSpec(phones_per_word=(5, 2))


class TestSplit:
    def test_deterministic_and_disjoint(self):
        ids = [f"spk{s:02d}u{u:03d}" for s in range(3) for u in range(10)]
        train, test = split_utterances(ids)
        train2, test2 = split_utterances(list(reversed(ids)))
        assert train == train2 and test == test2
        assert set(train) | set(test) == set(ids)
        assert not set(train) & set(test)
        assert len(test) == 6

    def test_balanced_across_speakers(self):
        ids = [f"spk{s:02d}u{u:03d}" for s in range(4) for u in range(20)]
        _, test = split_utterances(ids)
        per_spk = {}
        for utt in test:
            per_spk[utt[:5]] = per_spk.get(utt[:5], 0) + 1
        assert all(v == 4 for v in per_spk.values())
