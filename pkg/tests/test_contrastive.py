import math

import numpy as np
import pytest

from awekit.contrastive import (
    ContrastiveBatch,
    TrainConfig,
    build_batches,
    cosine,
    ntxent_grad,
    ntxent_loss,
    train_pooler,
)
from awekit.featurestore import FrameMatrix, SegmentRef, open_features, write_features
from awekit.pairs import PairSet
from awekit.pooling import PoolerConfig, init_pooler
from oracles import finite_difference, rel_error


class TestCosine:
    def test_self_similarity(self):
        v = np.array([0.3, -1.2, 2.0])
        assert cosine(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_scale_invariance(self):
        v = np.array([0.5, 2.0, -1.0])
        assert cosine(v, 2.0 * v) == pytest.approx(1.0)

    def test_zero_vector_guard(self):
        assert cosine(np.zeros(3), np.array([1.0, 2.0, 3.0])) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim mismatch"):
            cosine(np.zeros(3), np.zeros(4))


def vectors_with_cosines(cos_pos, cos_negs):
    """Anchor e0; others constructed in 2D planes to hit exact cosines."""
    dim = 2 + len(cos_negs)
    anchor = np.zeros(dim)
    anchor[0] = 1.0
    positive = np.zeros(dim)
    positive[0] = cos_pos
    positive[1] = math.sqrt(max(0.0, 1 - cos_pos**2)) or 1e-300
    negatives = []
    for j, c in enumerate(cos_negs):
        neg = np.zeros(dim)
        neg[0] = c
        neg[2 + j] = math.sqrt(max(0.0, 1 - c**2))
        negatives.append(neg)
    return anchor, positive, negatives


class TestNtxentLoss:
    def test_reference_value(self):
        # cos(c, c+) = 1, one negative at cos 0, tau = 1
        anchor, positive, negatives = vectors_with_cosines(1.0, [0.0])
        loss = ntxent_loss(anchor, positive, negatives, tau=1.0, mode="standard")
        assert loss == pytest.approx(-math.log(math.e / (math.e + 1.0)), abs=1e-12)

    def test_literal_mode_with_positive_as_negatives(self):
        anchor, positive, _ = vectors_with_cosines(0.6, [])
        loss = ntxent_loss(anchor, positive, [positive], tau=0.5, mode="literal")
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_closed_form(self):
        for k in (1, 3, 10):
            cos = 0.4
            anchor, positive, negatives = vectors_with_cosines(cos, [cos] * k)
            loss = ntxent_loss(anchor, positive, negatives, tau=0.2, mode="standard")
            assert loss == pytest.approx(math.log(k + 1), abs=1e-9)

    def test_standard_mode_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            vecs = rng.standard_normal((5, 6))
            loss = ntxent_loss(vecs[0], vecs[1], list(vecs[2:]), tau=0.07)
            assert loss >= 0.0

    def test_decreases_in_positive_cosine(self):
        losses = []
        for cos_pos in (0.0, 0.3, 0.6, 0.9):
            anchor, positive, negatives = vectors_with_cosines(cos_pos, [0.2, -0.4])
            losses.append(ntxent_loss(anchor, positive, negatives, tau=0.1))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_rescaling_any_vector_invariant(self):
        rng = np.random.default_rng(1)
        vecs = rng.standard_normal((4, 5))
        base = ntxent_loss(vecs[0], vecs[1], list(vecs[2:]), tau=0.07)
        scaled = ntxent_loss(3.7 * vecs[0], vecs[1], [vecs[2], 0.01 * vecs[3]], tau=0.07)
        assert scaled == pytest.approx(base, rel=1e-12)

    def test_finite_for_extreme_inputs(self):
        anchor, positive, negatives = vectors_with_cosines(-1.0, [1.0, 1.0])
        loss = ntxent_loss(anchor, positive, negatives, tau=1e-3)
        assert np.isfinite(loss)

    def test_empty_negatives_rejected(self):
        anchor, positive, _ = vectors_with_cosines(0.5, [])
        with pytest.raises(ValueError, match="empty negative set"):
            ntxent_loss(anchor, positive, [])


class TestNtxentGrad:
    @pytest.mark.parametrize("mode", ["standard", "literal"])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, mode, seed):
        rng = np.random.default_rng(seed)
        dim = int(rng.integers(2, 6))
        n_negs = int(rng.integers(1, 5))
        vecs = rng.standard_normal((2 + n_negs, dim))
        tau = float(rng.uniform(0.05, 1.0))

        def fn(theta):
            parts = theta.reshape(2 + n_negs, dim)
            return ntxent_loss(parts[0], parts[1], list(parts[2:]), tau=tau, mode=mode)

        grads = ntxent_grad(vecs[0], vecs[1], list(vecs[2:]), tau=tau, mode=mode)
        analytic = np.concatenate(
            [grads["anchor"], grads["positive"]] + grads["negatives"]
        )
        numeric = finite_difference(fn, vecs.ravel().astype(np.float64))
        assert rel_error(analytic, numeric) < 1e-6

    def test_symmetric_point(self):
        anchor, positive, negatives = vectors_with_cosines(0.5, [0.5, 0.5, 0.5])
        grads = ntxent_grad(anchor, positive, negatives, tau=0.2)
        assert np.linalg.norm(grads["positive"]) > 0
        norms = [np.linalg.norm(g) for g in grads["negatives"]]
        assert norms[0] == pytest.approx(norms[1], rel=1e-9)
        assert norms[0] == pytest.approx(norms[2], rel=1e-9)

    def test_gradients_vanish_with_temperature(self):
        rng = np.random.default_rng(2)
        vecs = rng.standard_normal((5, 4))
        norms = []
        for tau in (0.1, 1.0, 10.0, 100.0, 1000.0):
            grads = ntxent_grad(vecs[0], vecs[1], list(vecs[2:]), tau=tau)
            norms.append(np.linalg.norm(
                np.concatenate([grads["anchor"], grads["positive"]] + grads["negatives"])
            ))
        assert all(a > b for a, b in zip(norms, norms[1:]))
        assert norms[-1] < 1e-2  # decays like 1/tau


class TestBatchLossPath:
    """The vectorized in-batch path must agree with the scalar ops."""

    def batch_case(self, seed, b=5, dim=4):
        rng = np.random.default_rng(seed)
        awes = rng.standard_normal((2 * b, dim))
        keys = [f"k{int(rng.integers(3))}" for _ in range(b)]
        return awes, keys

    @pytest.mark.parametrize("mode", ["standard", "literal"])
    def test_matches_per_slot_ntxent(self, mode):
        from awekit.contrastive import _batch_loss_and_awe_grads

        awes, keys = self.batch_case(0)
        b = len(keys)
        loss, _, n_valid = _batch_loss_and_awe_grads(awes, keys, 0.2, mode)
        expected = []
        for i in range(b):
            negs = [awes[j] for j in range(2 * b) if keys[j % b] != keys[i]]
            if not negs:
                continue
            expected.append(ntxent_loss(awes[i], awes[b + i], negs, 0.2, mode))
        assert n_valid == len(expected)
        assert loss == pytest.approx(float(np.mean(expected)), rel=1e-12)

    @pytest.mark.parametrize("mode", ["standard", "literal"])
    def test_awe_grads_match_finite_differences(self, mode):
        from awekit.contrastive import _batch_loss_and_awe_grads

        awes, keys = self.batch_case(1, b=4, dim=3)

        def fn(theta):
            loss, _, _ = _batch_loss_and_awe_grads(
                theta.reshape(awes.shape), keys, 0.3, mode
            )
            return loss

        _, d_awes, _ = _batch_loss_and_awe_grads(awes, keys, 0.3, mode)
        numeric = finite_difference(fn, awes.ravel())
        assert rel_error(d_awes.ravel(), numeric) < 1e-6


def seg(utt, start, end):
    return SegmentRef(utt, start, end)


def toy_pairset(n_pairs, n_keys=5, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        key = f"k{int(rng.integers(n_keys))}"
        a = seg(f"u{int(rng.integers(4))}", 0, 4 + int(rng.integers(3)))
        b = seg(f"u{int(rng.integers(4))}", 2, 8)
        if a == b:
            b = seg(b.utt_id, 3, 9)
        pairs.append((a, b, key))
    return PairSet(pairs=pairs, provenance="mpr")


class TestBuildBatches:
    def test_exact_split(self):
        pairs = toy_pairset(300)
        batches = build_batches(pairs, 150, seed=1)
        assert [len(b) for b in batches] == [150, 150]

    def test_shared_key_excluded_from_negatives(self):
        batch = ContrastiveBatch(
            anchors=[(seg("u", 0, 2), "aa"), (seg("u", 4, 6), "aa"), (seg("u", 8, 10), "bb")],
            positives=[seg("u", 2, 4), seg("u", 6, 8), seg("u", 10, 12)],
        )
        negs0 = batch.negative_awe_indices(0)
        assert negs0 == [2, 5]  # only the "bb" slot's anchor and positive
        negs2 = batch.negative_awe_indices(2)
        assert negs2 == [0, 1, 3, 4]

    def test_same_seed_same_batches(self):
        pairs = toy_pairset(137)
        with pytest.warns(UserWarning):
            a = build_batches(pairs, 150, seed=9)
        with pytest.warns(UserWarning):
            b = build_batches(pairs, 150, seed=9)
        assert a[0].anchors == b[0].anchors
        assert a[0].positives == b[0].positives

    def test_small_input_warns(self):
        pairs = toy_pairset(10)
        with pytest.warns(UserWarning, match="smaller batch"):
            batches = build_batches(pairs, 150, seed=0)
        assert len(batches) == 1 and len(batches[0]) == 10


class TestTrainPooler:
    @pytest.fixture
    def store_and_pairs(self, tmp_path):
        rng = np.random.default_rng(3)
        # four frame "prototypes" so same-key segments genuinely match and
        # every 4-slot batch is guaranteed at least two distinct keys
        protos = rng.standard_normal((4, 8)).astype(np.float32)
        records, pairs = [], []
        for u in range(12):
            which = u % 4
            frames = protos[which] + 0.1 * rng.standard_normal((12, 8)).astype(np.float32)
            records.append(FrameMatrix(f"u{u:02d}", frames.astype(np.float32), 20.0))
        for a in range(12):
            for b in range(a + 1, 12):
                if a % 4 == b % 4:
                    pairs.append((seg(f"u{a:02d}", 0, 6), seg(f"u{b:02d}", 2, 10), f"k{a % 4}"))
        path = tmp_path / "f.awf"
        write_features(records, path)
        return open_features(path), PairSet(pairs=pairs, provenance="mpr")

    def small_pooler(self):
        cfg = PoolerConfig(input_dim=8, hidden_dim=8, conv_kernel=2,
                           conv_stride=2, n_heads=2, max_positions=8, seed=0)
        return init_pooler(cfg)

    def test_zero_learning_rate_keeps_params(self, store_and_pairs):
        store, pairs = store_and_pairs
        pooler = self.small_pooler()
        cfg = TrainConfig(batch_size=4, epochs=2, learning_rate=0.0, seed=5)
        trained, _ = train_pooler(store, pairs, pooler, cfg)
        for a, b in zip(pooler.arrays(), trained.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_log_length_counts_steps(self, store_and_pairs):
        store, pairs = store_and_pairs
        cfg = TrainConfig(batch_size=4, epochs=3, max_iterations_per_epoch=2,
                          learning_rate=1e-3, seed=5)
        _, log = train_pooler(store, pairs, self.small_pooler(), cfg)
        assert len(log) == 3 * 2

    def test_bit_identical_reruns(self, store_and_pairs, tmp_path):
        from awekit.pooling import save_pooler

        store, pairs = store_and_pairs
        cfg = TrainConfig(batch_size=4, epochs=2, learning_rate=1e-3, seed=5)
        t1, _ = train_pooler(store, pairs, self.small_pooler(), cfg)
        t2, _ = train_pooler(store, pairs, self.small_pooler(), cfg)
        p1, p2 = tmp_path / "a.awp", tmp_path / "b.awp"
        save_pooler(t1, p1)
        save_pooler(t2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loss_decreases_on_separable_data(self, store_and_pairs):
        store, pairs = store_and_pairs
        cfg = TrainConfig(batch_size=8, epochs=6, learning_rate=3e-3, seed=1)
        _, log = train_pooler(store, pairs, self.small_pooler(), cfg)
        means = log.epoch_means()
        assert means[-1] < means[0]
