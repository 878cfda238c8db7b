import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crfdistill.lattice import (
    Lattice,
    Tagset,
    backward_scores,
    forward_scores,
    kbest_viterbi,
    log_partition,
    log_potential,
    nll_and_grad,
    pairwise_marginals,
    posteriors,
    sequence_log_prob,
    viterbi,
    weighted_log_marginal_grad,
)

from conftest import (
    EX_ALPHA,
    EX_BETA,
    EX_Q,
    EX_SEQ_PROBS,
    EX_TOP2,
    F,
    T,
    fd_lattice_grad,
    oracle_log_partition,
    oracle_marginals,
    oracle_sorted_paths,
    random_lattice,
)


class TestTagset:
    def test_basic(self):
        ts = Tagset(("O", "B-PER", "I-PER"))
        assert ts.size == 3
        assert ts.start_id == 3
        assert ts.index("B-PER") == 1

    def test_rejects_duplicates_and_empty(self):
        with pytest.raises(ValueError):
            Tagset(("A", "A"))
        with pytest.raises(ValueError):
            Tagset(("A", ""))
        with pytest.raises(ValueError):
            Tagset(())


class TestLatticeInvariants:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Lattice(np.array([[0.0, np.inf]]), np.zeros((3, 2)))

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            Lattice(np.zeros((2, 3)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            Lattice(np.zeros((0, 2)), np.zeros((3, 2)))


class TestLogPotential:
    def test_example_start(self, example_lattice):
        # psi(start, F, r_1) = 1
        assert log_potential(example_lattice, 2, F, 0) == pytest.approx(0.0)
        assert log_potential(example_lattice, 2, T, 0) == pytest.approx(0.0)

    def test_example_pair_entry(self, example_lattice):
        # position-1 pair table, F -> F entry is 2
        assert log_potential(example_lattice, F, F, 1) == pytest.approx(math.log(2))
        assert log_potential(example_lattice, T, F, 2) == pytest.approx(math.log(4))

    def test_all_zero_identity(self):
        lat = Lattice(np.zeros((3, 2)), np.zeros((3, 2)))
        assert log_potential(lat, 0, 1, 1) == 0.0
        assert log_potential(lat, 2, 0, 0) == 0.0

    def test_errors(self, example_lattice):
        with pytest.raises(IndexError):
            log_potential(example_lattice, F, F, 5)
        with pytest.raises(IndexError):
            log_potential(example_lattice, F, 7, 0)
        with pytest.raises(ValueError):
            log_potential(example_lattice, 2, F, 1)  # start beyond position 0


class TestLogPartition:
    def test_example(self, example_lattice):
        expect = oracle_log_partition(example_lattice)
        got = log_partition(example_lattice)
        assert got == pytest.approx(expect, abs=1e-12)
        assert got == pytest.approx(2.9423, abs=5e-4)
        assert math.exp(got) == pytest.approx(18.9583, abs=5e-4)

    def test_two_unit_paths(self):
        lat = Lattice(np.zeros((1, 2)), np.zeros((3, 2)))
        assert log_partition(lat) == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            lat = random_lattice(rng, 4, 3)
            assert log_partition(lat) == pytest.approx(oracle_log_partition(lat), rel=1e-10)


class TestSequenceLogProb:
    def test_example_rows(self, example_lattice):
        assert math.exp(sequence_log_prob(example_lattice, (T, T, F))) == pytest.approx(0.422, abs=5e-4)
        assert math.exp(sequence_log_prob(example_lattice, (F, F, T))) == pytest.approx(0.316, abs=5e-4)
        for seq, prob in EX_SEQ_PROBS.items():
            assert math.exp(sequence_log_prob(example_lattice, seq)) == pytest.approx(prob, abs=5e-4)

    def test_normalization(self, example_lattice):
        total = sum(math.exp(sequence_log_prob(example_lattice, seq)) for seq in EX_SEQ_PROBS)
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_length_mismatch(self, example_lattice):
        with pytest.raises(ValueError):
            sequence_log_prob(example_lattice, (F, T))


class TestViterbi:
    def test_example(self, example_lattice):
        assert tuple(viterbi(example_lattice)) == (T, T, F)

    def test_all_zero_tie_break(self):
        lat = Lattice(np.zeros((4, 3)), np.zeros((4, 3)))
        assert viterbi(lat) == [0, 0, 0, 0]

    def test_matches_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            lat = random_lattice(rng, 5, 4)
            paths, _ = oracle_sorted_paths(lat)
            assert tuple(viterbi(lat)) == paths[0]


class TestKBest:
    def test_example_top2(self, example_lattice):
        kb = kbest_viterbi(example_lattice, 2)
        for got, (labels, weight) in zip(kb.sequences, EX_TOP2):
            assert got.labels == labels
            assert got.normalized_weight == pytest.approx(weight, abs=5e-3)

    def test_example_full(self, example_lattice):
        kb = kbest_viterbi(example_lattice, 8)
        assert len(kb) == 8
        for entry in kb:
            assert entry.normalized_weight == pytest.approx(EX_SEQ_PROBS[entry.labels], abs=5e-3)
        assert kb.weights().sum() == pytest.approx(1.0, abs=1e-9)

    def test_k1_equals_viterbi(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            lat = random_lattice(rng, 4, 3)
            kb = kbest_viterbi(lat, 1)
            assert len(kb) == 1
            assert list(kb.sequences[0].labels) == viterbi(lat)
            assert kb.sequences[0].normalized_weight == pytest.approx(1.0)

    def test_k_exceeding_path_count_returns_all(self):
        lat = Lattice(np.zeros((2, 2)), np.zeros((3, 2)))
        kb = kbest_viterbi(lat, 50)
        assert len(kb) == 4
        assert sorted(e.labels for e in kb) == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_rejects_bad_k(self, example_lattice):
        with pytest.raises(ValueError):
            kbest_viterbi(example_lattice, 0)

    def test_matches_enumeration_all_k(self):
        rng = np.random.default_rng(3)
        for _ in range(15):
            n = int(rng.integers(1, 5))
            v = int(rng.integers(2, 4))
            lat = random_lattice(rng, n, v)
            paths, scores = oracle_sorted_paths(lat)
            total = v ** n
            for k in range(1, total + 2):
                kb = kbest_viterbi(lat, k)
                m = min(k, total)
                assert len(kb) == m
                assert [e.labels for e in kb] == paths[:m]
                probs = np.exp(scores[:m] - scores[:m].max())
                np.testing.assert_allclose(kb.weights(), probs / probs.sum(), rtol=1e-9)

    def test_tie_break_ordering_on_flat_lattice(self):
        lat = Lattice(np.zeros((3, 2)), np.zeros((3, 2)))
        kb = kbest_viterbi(lat, 8)
        paths, _ = oracle_sorted_paths(lat)
        assert [e.labels for e in kb] == paths
        # all scores tie, so ordering is by reversed-label tuples
        assert kb.sequences[0].labels == (0, 0, 0)
        assert kb.sequences[1].labels == (1, 0, 0)

    def test_scores_non_increasing(self):
        rng = np.random.default_rng(4)
        lat = random_lattice(rng, 5, 3)
        kb = kbest_viterbi(lat, 20)
        s = [e.log_joint_score for e in kb]
        assert all(a >= b for a, b in zip(s, s[1:]))
        assert len({e.labels for e in kb}) == len(kb)


class TestForwardBackward:
    def test_example_alpha(self, example_lattice):
        a = np.exp(forward_scores(example_lattice))
        np.testing.assert_allclose(a[:, F], EX_ALPHA[F], atol=5e-3)
        np.testing.assert_allclose(a[:, T], EX_ALPHA[T], atol=5e-3)

    def test_example_beta(self, example_lattice):
        b = np.exp(backward_scores(example_lattice))
        np.testing.assert_allclose(b[:, F], EX_BETA[F], atol=5e-3)
        np.testing.assert_allclose(b[:, T], EX_BETA[T], atol=5e-3)

    def test_single_token_boundaries(self):
        lat = Lattice(np.zeros((1, 3)), np.zeros((4, 3)))
        np.testing.assert_array_equal(forward_scores(lat), np.zeros((1, 3)))
        np.testing.assert_array_equal(backward_scores(lat), np.zeros((1, 3)))

    def test_final_beta_column_is_zero(self):
        rng = np.random.default_rng(5)
        lat = random_lattice(rng, 6, 4)
        assert np.all(backward_scores(lat)[-1] == 0.0)

    def test_alpha_beta_product_is_partition(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            lat = random_lattice(rng, 5, 3)
            la, lb = forward_scores(lat), backward_scores(lat)
            logz = log_partition(lat)
            per_pos = np.log(np.exp(la + lb - logz).sum(axis=1))
            np.testing.assert_allclose(per_pos, 0.0, atol=1e-9)

    def test_prefix_suffix_sums_match_enumeration(self):
        rng = np.random.default_rng(7)
        lat = random_lattice(rng, 4, 3)
        q = oracle_marginals(lat)
        got = np.exp(forward_scores(lat) + backward_scores(lat) - log_partition(lat))
        np.testing.assert_allclose(got, q, rtol=1e-10)


class TestPosteriors:
    def test_example(self, example_lattice):
        q = posteriors(example_lattice)
        np.testing.assert_allclose(q[:, F], EX_Q[F], atol=5e-3)
        np.testing.assert_allclose(q[:, T], EX_Q[T], atol=5e-3)

    def test_uniform_on_zero_lattice(self):
        lat = Lattice(np.zeros((4, 3)), np.zeros((4, 3)))
        np.testing.assert_allclose(posteriors(lat), 1.0 / 3.0, atol=1e-12)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(8)
        for shared in (True, False):
            lat = random_lattice(rng, 5, 3, shared=shared)
            np.testing.assert_allclose(posteriors(lat), oracle_marginals(lat), atol=1e-10)

    def test_rows_stochastic(self):
        rng = np.random.default_rng(9)
        lat = random_lattice(rng, 6, 4, scale=3.0)
        q = posteriors(lat)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(q >= 0) and np.all(q <= 1)


class TestNLLAndGrad:
    def test_example_loss(self, example_lattice):
        loss, _ = nll_and_grad(example_lattice, (T, T, F))
        assert loss == pytest.approx(-math.log(0.422), abs=2e-3)

    def test_confident_model_zero_emission_grad(self):
        # huge margins make the posterior an indicator of the gold path
        em = np.full((3, 2), -50.0)
        gold = [0, 1, 0]
        for i, g in enumerate(gold):
            em[i, g] = 50.0
        lat = Lattice(em, np.zeros((3, 2)))
        _, grad = nll_and_grad(lat, gold)
        np.testing.assert_allclose(grad.emissions, 0.0, atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        for shared in (True, False):
            lat = random_lattice(rng, 4, 3, shared=shared)
            gold = [int(g) for g in rng.integers(0, 3, size=4)]
            loss, grad = nll_and_grad(lat, gold)
            fd_em, fd_tr = fd_lattice_grad(lambda l: -sequence_log_prob(l, gold), lat)
            np.testing.assert_allclose(grad.emissions, fd_em, rtol=1e-4, atol=1e-7)
            np.testing.assert_allclose(grad.transitions, fd_tr, rtol=1e-4, atol=1e-7)

    def test_length_mismatch(self, example_lattice):
        with pytest.raises(ValueError):
            nll_and_grad(example_lattice, (F, T))


class TestPairwiseMarginals:
    def test_rows_sum_to_token_marginals(self):
        rng = np.random.default_rng(11)
        lat = random_lattice(rng, 5, 3)
        xi = pairwise_marginals(lat)
        np.testing.assert_allclose(xi.sum(axis=1), posteriors(lat), atol=1e-10)

    def test_start_row_only_at_first_position(self):
        rng = np.random.default_rng(12)
        lat = random_lattice(rng, 4, 3)
        xi = pairwise_marginals(lat)
        assert np.all(xi[1:, 3, :] == 0.0)
        np.testing.assert_allclose(xi[0, 3, :], posteriors(lat)[0], atol=1e-12)


class TestWeightedLogMarginalGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        for shared in (True, False):
            lat = random_lattice(rng, 4, 3, shared=shared)
            w = rng.normal(size=(4, 3))

            def objective(l):
                q = posteriors(l)
                return float((w * np.log(q)).sum())

            grad = weighted_log_marginal_grad(lat, w)
            fd_em, fd_tr = fd_lattice_grad(objective, lat)
            np.testing.assert_allclose(grad.emissions, fd_em, rtol=1e-4, atol=1e-7)
            np.testing.assert_allclose(grad.transitions, fd_tr, rtol=1e-4, atol=1e-7)

    def test_single_token(self):
        rng = np.random.default_rng(14)
        lat = random_lattice(rng, 1, 3)
        w = rng.normal(size=(1, 3))
        grad = weighted_log_marginal_grad(lat, w)
        fd_em, fd_tr = fd_lattice_grad(
            lambda l: float((w * np.log(posteriors(l))).sum()), lat)
        np.testing.assert_allclose(grad.emissions, fd_em, rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(grad.transitions, fd_tr, rtol=1e-4, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(-4, 4), pos=st.integers(0, 3))
def test_emission_shift_invariance(seed, c, pos):
    """Adding a constant to one position's emission row leaves probabilities,
    posteriors, decoding, and k-best weights unchanged."""
    rng = np.random.default_rng(seed)
    lat = random_lattice(rng, 4, 3)
    em = lat.emissions.copy()
    em[pos] += c
    shifted = Lattice(em, lat.transitions)
    y = [int(g) for g in rng.integers(0, 3, size=4)]
    assert sequence_log_prob(shifted, y) == pytest.approx(sequence_log_prob(lat, y), abs=1e-9)
    np.testing.assert_allclose(posteriors(shifted), posteriors(lat), atol=1e-9)
    assert viterbi(shifted) == viterbi(lat)
    kb, kb2 = kbest_viterbi(lat, 5), kbest_viterbi(shifted, 5)
    assert [e.labels for e in kb] == [e.labels for e in kb2]
    np.testing.assert_allclose(kb.weights(), kb2.weights(), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6), v=st.integers(2, 4))
def test_total_probability_mass(seed, n, v):
    rng = np.random.default_rng(seed)
    lat = random_lattice(rng, n, v, scale=2.0)
    import itertools
    total = sum(math.exp(sequence_log_prob(lat, p))
                for p in itertools.product(range(v), repeat=n))
    assert total == pytest.approx(1.0, abs=1e-9)
