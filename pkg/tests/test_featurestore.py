import numpy as np
import pytest

from awekit.featurestore import (
    FeatureFileError,
    FrameMatrix,
    SegmentRef,
    WordSegment,
    filter_eval_words,
    load_alignments,
    open_features,
    seconds_to_segment,
    write_features,
)


def make_records(rng, n=3, shape=(5, 8), period=20.0):
    return [
        FrameMatrix(f"utt{i}", rng.standard_normal(shape).astype(np.float32), period)
        for i in range(n)
    ]


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        records = make_records(rng)
        path = tmp_path / "feat.awf"
        write_features(records, path)
        store = open_features(path)
        assert store.utt_ids == [r.utt_id for r in records]
        assert store.dim == 8
        assert store.frame_period_ms == 20.0
        for rec in records:
            got = store.get_utterance(rec.utt_id)
            assert got.dtype == np.float32
            np.testing.assert_array_equal(got, rec.frames)

    def test_write_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(1)
        records = make_records(rng)
        p1, p2 = tmp_path / "a.awf", tmp_path / "b.awf"
        write_features(records, p1)
        write_features(records, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_mixed_dims_rejected(self, tmp_path):
        records = [
            FrameMatrix("a", np.zeros((2, 8), np.float32), 20.0),
            FrameMatrix("b", np.zeros((2, 9), np.float32), 20.0),
        ]
        with pytest.raises(FeatureFileError, match="inconsistent dimension"):
            write_features(records, tmp_path / "x.awf")

    def test_duplicate_id_rejected(self, tmp_path):
        rec = FrameMatrix("a", np.zeros((2, 4), np.float32), 20.0)
        with pytest.raises(FeatureFileError, match="duplicate"):
            write_features([rec, rec], tmp_path / "x.awf")

    def test_non_finite_rejected(self):
        bad = np.zeros((2, 4), np.float32)
        bad[1, 2] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            FrameMatrix("a", bad, 20.0)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.awf"
        path.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(FeatureFileError, match="unrecognized format"):
            open_features(path)

    def test_truncated_payload_names_utterance(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "x.awf"
        write_features(make_records(rng), path)
        data = path.read_bytes()
        path.write_bytes(data[:-7])
        with pytest.raises(FeatureFileError, match="truncated.*utt2"):
            open_features(path)

    def test_version_mismatch(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "x.awf"
        write_features(make_records(rng, n=1), path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(FeatureFileError, match="version mismatch"):
            open_features(path)


class TestGetFrames:
    @pytest.fixture
    def store(self, tmp_path):
        rng = np.random.default_rng(4)
        self.records = make_records(rng, n=2, shape=(5, 3))
        path = tmp_path / "f.awf"
        write_features(self.records, path)
        return open_features(path)

    def test_full_slice(self, store):
        got = store.get_frames(SegmentRef("utt0", 0, 5))
        np.testing.assert_array_equal(got, self.records[0].frames)

    def test_interior_slice(self, store):
        got = store.get_frames(SegmentRef("utt1", 2, 4))
        np.testing.assert_array_equal(got, self.records[1].frames[2:4])

    def test_out_of_range(self, store):
        with pytest.raises(ValueError, match="segment exceeds utterance"):
            store.get_frames(SegmentRef("utt0", 4, 9))

    def test_unknown_utt(self, store):
        with pytest.raises(KeyError, match="nope"):
            store.get_frames(SegmentRef("nope", 0, 1))

    def test_adjacent_slices_concatenate(self, store):
        a = store.get_frames(SegmentRef("utt0", 0, 2))
        b = store.get_frames(SegmentRef("utt0", 2, 5))
        c = store.get_frames(SegmentRef("utt0", 0, 5))
        np.testing.assert_array_equal(np.concatenate([a, b]), c)


class TestSecondsToSegment:
    def test_exact_multiple(self):
        assert seconds_to_segment(0.00, 0.10, 20.0) == (0, 5)

    def test_floor_ceil(self):
        # floor(13/20) = 0, ceil(51/20) = 3
        assert seconds_to_segment(0.013, 0.051, 20.0) == (0, 3)

    def test_never_empty(self):
        assert seconds_to_segment(0.040, 0.040 + 1e-4, 20.0) == (2, 3)

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            seconds_to_segment(-0.1, 0.2, 20.0)

    def test_monotone_and_nonempty(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            a = float(rng.uniform(0, 5))
            b = a + float(rng.uniform(1e-5, 2))
            s, e = seconds_to_segment(a, b, 20.0)
            assert e > s
            s2, e2 = seconds_to_segment(a, b + 0.5, 20.0)
            assert e2 >= e and s2 == s
            s3, e3 = seconds_to_segment(a + 0.5, b + 0.5, 20.0)
            assert s3 >= s and e3 >= e


class TestAlignments:
    def test_basic_parse(self, tmp_path):
        path = tmp_path / "ali.tsv"
        path.write_text("u1\tspkA\t0.000\t0.100\ta\nu1\tspkA\t0.100\t0.300\tb\n")
        alis = load_alignments(path)
        assert len(alis) == 1
        assert alis[0].utt_id == "u1"
        assert alis[0].speaker_id == "spkA"
        assert alis[0].entries == ((0.0, 0.1, "a"), (0.1, 0.3, "b"))

    def test_end_before_start(self, tmp_path):
        path = tmp_path / "ali.tsv"
        path.write_text("u1\ts\t0.200\t0.100\ta\n")
        with pytest.raises(ValueError, match=":1:"):
            load_alignments(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "ali.tsv"
        path.write_text("")
        assert load_alignments(path) == []

    def test_overlap_rejected(self, tmp_path):
        path = tmp_path / "ali.tsv"
        path.write_text("u1\ts\t0.000\t0.200\ta\nu1\ts\t0.100\t0.300\tb\n")
        with pytest.raises(ValueError, match="overlapping"):
            load_alignments(path)

    def test_unsorted_rejected(self, tmp_path):
        path = tmp_path / "ali.tsv"
        path.write_text("u1\ts\t0.500\t0.600\ta\nu1\ts\t0.100\t0.300\tb\n")
        with pytest.raises(ValueError, match="unsorted"):
            load_alignments(path)


class TestFilterEvalWords:
    def seg(self, word, dur, spk="s"):
        return WordSegment("u", 1.0, 1.0 + dur, word, spk)

    def test_keeps_long_enough(self):
        kept = filter_eval_words([self.seg("hello", 0.6)], 5, 2, 0.5)
        assert len(kept) == 1

    def test_drops_short_word(self):
        assert filter_eval_words([self.seg("hi", 0.9)], 5, 2, 0.5) == []

    def test_drops_short_duration(self):
        assert filter_eval_words([self.seg("hello", 0.4)], 5, 2, 0.5) == []

    def test_alt_threshold(self):
        segs = [self.seg("你好", 0.9)]
        assert filter_eval_words(segs, 5, 2, 0.5) == []
        assert filter_eval_words(segs, 5, 2, 0.5, use_alt_chars=True) == segs

    def test_subset_and_idempotent(self):
        rng = np.random.default_rng(6)
        segs = [
            self.seg("w" * int(rng.integers(1, 9)), float(rng.uniform(0.1, 1.2)))
            for _ in range(50)
        ]
        once = filter_eval_words(segs, 5, 2, 0.5)
        assert set(id(s) for s in once) <= set(id(s) for s in segs)
        assert filter_eval_words(once, 5, 2, 0.5) == once
