import numpy as np
import pytest

from protoseg.prototypes import (
    Assignment,
    PrototypeBank,
    assign,
    class_similarities,
    cluster_stats,
    confidence_filter,
    init_kmeans,
    minibatch_kmeans,
    momentum_update,
)


def make_bank(seed=0, c=3, k=2, d=4, eta=0.9):
    rng = np.random.default_rng(seed)
    return PrototypeBank(vectors=rng.normal(size=(c, k, d)), eta=eta)


class TestBankInvariants:
    def test_shape_enforced(self):
        with pytest.raises(ValueError):
            PrototypeBank(vectors=np.zeros((2, 4)), eta=0.5)

    def test_nonfinite_rejected(self):
        v = np.zeros((2, 2, 3))
        v[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            PrototypeBank(vectors=v, eta=0.5)

    def test_eta_range(self):
        PrototypeBank(vectors=np.zeros((2, 1, 3)), eta=0.0)  # allowed
        with pytest.raises(ValueError):
            PrototypeBank(vectors=np.zeros((2, 1, 3)), eta=1.0)

    def test_flat_layout(self):
        b = make_bank(1)
        assert np.array_equal(b.flat()[1 * b.protos_per_class + 1], b.vectors[1, 1])


class TestAssign:
    def test_exhaustive_scan_oracle(self):
        # oracle: loop over every (class, proto), cosine by hand
        bank = make_bank(2, c=3, k=2, d=5)
        rng = np.random.default_rng(3)
        zs = rng.normal(size=(20, 5))
        out = assign(zs, bank)
        for i, z in enumerate(zs):
            best = (-2.0, None, None)
            for c in range(3):
                for k in range(2):
                    p = bank.vectors[c, k]
                    s = float(z @ p / (np.linalg.norm(z) * np.linalg.norm(p)))
                    if s > best[0]:
                        best = (s, c, k)
            assert out.class_index[i] == best[1]
            assert out.proto_index[i] == best[2]
            assert out.class_best_sim[i, best[1]] == pytest.approx(best[0], abs=1e-12)

    def test_class_best_k_per_class(self):
        bank = make_bank(4, c=2, k=3, d=4)
        z = np.random.default_rng(5).normal(size=4)
        out = assign(z, bank)
        sims = class_similarities(z, bank)
        for c in range(2):
            assert out.class_best_k[c] == sims[c].argmax()

    def test_tie_breaks_to_lowest_index(self):
        v = np.zeros((2, 2, 3))
        v[:, :, 0] = 1.0  # all four prototypes identical
        bank = PrototypeBank(vectors=v, eta=0.5)
        out = assign(np.array([1.0, 0.0, 0.0]), bank)
        assert out.class_index == 0
        assert out.proto_index == 0

    def test_scale_invariant(self):
        bank = make_bank(6)
        z = np.array([0.5, -1.0, 2.0, 0.1])
        a1 = assign(z, bank)
        a2 = assign(7.0 * z, bank)
        assert a1.class_index == a2.class_index
        assert np.allclose(a1.class_best_sim, a2.class_best_sim, atol=1e-12)


class TestConfidenceFilter:
    def test_predicate_scan_oracle(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(50, 3))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        labeled = rng.random(50) < 0.3
        keep = confidence_filter(probs, labeled, 0.6)
        for i in range(50):
            want = labeled[i] or probs[i].max() > 0.6
            assert keep[i] == want

    def test_labeled_always_kept(self):
        probs = np.full((4, 2), 0.5)
        keep = confidence_filter(probs, np.array([True, False, True, False]), 0.9)
        assert keep.tolist() == [True, False, True, False]

    def test_threshold_strict_inequality(self):
        probs = np.array([[0.9, 0.1]])
        assert not confidence_filter(probs, np.array([False]), 0.9)[0]
        assert confidence_filter(probs, np.array([False]), 0.89)[0]

    def test_paper_threshold_value(self):
        # operating point alpha = 0.9: 0.95-confident voxels pass, 0.85 do not
        probs = np.array([[0.95, 0.05], [0.85, 0.15]])
        keep = confidence_filter(probs, np.zeros(2, dtype=bool), 0.9)
        assert keep.tolist() == [True, False]

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            confidence_filter(np.ones((1, 2)), np.zeros(1, dtype=bool), 1.5)


class TestClusterStats:
    def test_group_by_oracle(self):
        rng = np.random.default_rng(8)
        emb = rng.normal(size=(30, 4))
        classes = rng.integers(0, 3, size=30)
        protos = rng.integers(0, 2, size=30)
        means, counts = cluster_stats(emb, classes, protos, 3, 2)
        for c in range(3):
            for k in range(2):
                member = (classes == c) & (protos == k)
                assert counts[c, k] == member.sum()
                if member.any():
                    assert np.allclose(means[c, k], emb[member].mean(axis=0))
                else:
                    assert np.all(means[c, k] == 0.0)

    def test_empty_cluster_zero_mean(self):
        emb = np.ones((2, 3))
        means, counts = cluster_stats(emb, np.zeros(2, int), np.zeros(2, int), 2, 2)
        assert counts[0, 0] == 2
        assert counts.sum() == 2
        assert np.all(means[1] == 0.0)


class TestMomentumUpdate:
    def test_closed_form_geometric_decay(self):
        # repeated updates toward a fixed mean: gap shrinks as eta^t
        bank = PrototypeBank(vectors=np.zeros((1, 1, 3)), eta=0.9)
        target = np.full((1, 1, 3), 2.0)
        counts = np.ones((1, 1), dtype=np.int64)
        for _ in range(20):
            bank = momentum_update(bank, target, counts)
        gap = 2.0 - bank.vectors[0, 0, 0]
        assert gap == pytest.approx(2.0 * 0.9**20, abs=1e-12)

    def test_empty_clusters_bitwise_untouched(self):
        bank = make_bank(9, c=2, k=2)
        before = bank.vectors.copy()
        means = np.ones_like(bank.vectors)
        counts = np.array([[1, 0], [0, 0]])
        out = momentum_update(bank, means, counts)
        assert not np.array_equal(out.vectors[0, 0], before[0, 0])
        assert np.array_equal(out.vectors[0, 1], before[0, 1])
        assert np.array_equal(out.vectors[1], before[1])

    def test_eta_zero_jumps_to_mean(self):
        bank = PrototypeBank(vectors=np.full((1, 1, 2), 5.0), eta=0.0)
        out = momentum_update(bank, np.full((1, 1, 2), -3.0), np.ones((1, 1), int))
        assert np.allclose(out.vectors, -3.0)

    def test_input_bank_not_mutated(self):
        bank = make_bank(10)
        before = bank.vectors.copy()
        momentum_update(bank, np.ones_like(bank.vectors),
                        np.ones(bank.vectors.shape[:2], int))
        assert np.array_equal(bank.vectors, before)

    def test_shape_mismatch_rejected(self):
        bank = make_bank(11)
        with pytest.raises(ValueError):
            momentum_update(bank, np.zeros((1, 1, 2)), np.zeros((1, 1)))

    def test_default_eta_value(self):
        # default operating point eta = 0.999: one update moves 0.1% of the gap
        bank = PrototypeBank(vectors=np.zeros((1, 1, 1)), eta=0.999)
        out = momentum_update(bank, np.ones((1, 1, 1)), np.ones((1, 1), int))
        assert out.vectors[0, 0, 0] == pytest.approx(0.001, abs=1e-15)


class TestMinibatchKmeans:
    def test_k1_full_batch_exact_mean(self):
        rng = np.random.default_rng(12)
        pts = rng.normal(size=(40, 3))
        centers = minibatch_kmeans(pts, 1, batch_size=1000, iters=1,
                                   rng=np.random.default_rng(0))
        assert np.allclose(centers[0], pts.mean(axis=0), atol=1e-12)

    def test_separated_clouds_recovered(self):
        rng = np.random.default_rng(13)
        a = rng.normal(scale=0.05, size=(100, 2)) + np.array([5.0, 0.0])
        b = rng.normal(scale=0.05, size=(100, 2)) + np.array([-5.0, 0.0])
        pts = np.concatenate([a, b])
        centers = minibatch_kmeans(pts, 2, rng=np.random.default_rng(1))
        got = centers[np.argsort(centers[:, 0])]
        assert np.linalg.norm(got[0] - [-5.0, 0.0]) < 0.1
        assert np.linalg.norm(got[1] - [5.0, 0.0]) < 0.1

    def test_deterministic_for_fixed_seed(self):
        pts = np.random.default_rng(14).normal(size=(60, 4))
        c1 = minibatch_kmeans(pts, 3, rng=np.random.default_rng(7))
        c2 = minibatch_kmeans(pts, 3, rng=np.random.default_rng(7))
        assert np.array_equal(c1, c2)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            minibatch_kmeans(np.zeros((2, 3)), 5, rng=np.random.default_rng(0))


class TestInitKmeans:
    def test_bank_shape_and_eta(self):
        rng = np.random.default_rng(15)
        per_class = {c: rng.normal(size=(50, 4)) for c in range(3)}
        bank = init_kmeans(per_class, 2, 0.999, seed=0)
        assert bank.vectors.shape == (3, 2, 4)
        assert bank.eta == 0.999

    def test_missing_class_rejected(self):
        with pytest.raises(ValueError):
            init_kmeans({0: np.zeros((5, 2)), 2: np.zeros((5, 2))}, 1, 0.5)

    def test_error_names_starved_class(self):
        per_class = {0: np.zeros((10, 2)), 1: np.zeros((1, 2))}
        with pytest.raises(ValueError, match="class 1"):
            init_kmeans(per_class, 3, 0.5)

    def test_k1_centers_are_class_means(self):
        rng = np.random.default_rng(16)
        per_class = {c: rng.normal(size=(30, 3)) + 10.0 * c for c in range(2)}
        bank = init_kmeans(per_class, 1, 0.0, batch_size=10_000, iters=1, seed=0)
        for c in range(2):
            assert np.allclose(bank.vectors[c, 0], per_class[c].mean(axis=0),
                               atol=1e-12)
