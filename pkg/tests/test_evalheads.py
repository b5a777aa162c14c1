"""Linear probe, few-shot episodes, and prototype retrieval tests."""

import numpy as np
import pytest

from digebench.evalheads import (EpisodeSpec, bank_from_labels,
                                 build_prototypes, classify_by_prototype,
                                 fit_linear_probe, probe_lambda,
                                 probe_objective, probe_predict,
                                 probe_predict_proba, run_fewshot,
                                 simpleshot_episode,
                                 topk_nearest_to_prototype)
from digebench.numerics import NonFiniteError, RngStream


def separable_data(n_per_class=25, n_classes=3, dim=8, sep=8.0, seed=0):
    rng = RngStream(seed)
    X, y = [], []
    for c in range(n_classes):
        mu = np.zeros(dim)
        mu[c] = sep
        X.append(rng.substream(c).normal((n_per_class, dim)) + mu)
        y.extend([c] * n_per_class)
    return np.vstack(X), np.array(y, dtype=np.int64)


class TestProbeLambda:
    def test_literal_reference_values(self):
        assert probe_lambda(100, 1) == 1.0
        assert probe_lambda(1024, 11) == 1.07421875
        assert probe_lambda(512, 9) == 1.7578125

    def test_inverse_variant_groups_denominator(self):
        assert probe_lambda(512, 9, variant="inverse") == 100.0 / (512 * 9)

    def test_literal_formula(self):
        assert probe_lambda(200, 4) == (100 / 200) * 4

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            probe_lambda(10, 2, variant="other")

    def test_positive_arguments_required(self):
        with pytest.raises(ValueError):
            probe_lambda(0, 2)


class TestLinearProbe:
    def test_separable_reaches_full_accuracy(self):
        X, y = separable_data()
        probe = fit_linear_probe(X, y, probe_lambda(8, 3))
        assert probe.converged
        assert (probe_predict(probe, X) == y).all()

    def test_probabilities_normalized(self):
        X, y = separable_data(n_per_class=10)
        probe = fit_linear_probe(X, y, 1.0)
        p = probe_predict_proba(probe, X)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_solution_beats_origin(self):
        X, y = separable_data(n_per_class=10)
        lam = probe_lambda(8, 3)
        probe = fit_linear_probe(X, y, lam)
        x_star = np.concatenate([probe.weights.ravel(), probe.bias])
        f_star, _ = probe_objective(x_star, X, y, lam, 3)
        f_zero, _ = probe_objective(np.zeros_like(x_star), X, y, lam, 3)
        assert f_star < f_zero

    def test_bias_unregularized(self):
        # Shifting all scores equally is free: with one-class-vs-rest offsets the
        # objective gradient at the optimum must vanish for the bias exactly.
        X, y = separable_data(n_per_class=10)
        lam = 5.0
        probe = fit_linear_probe(X, y, lam)
        x_star = np.concatenate([probe.weights.ravel(), probe.bias])
        _, g = probe_objective(x_star, X, y, lam, 3)
        assert np.abs(g[-3:]).max() < 1e-6

    def test_single_class_rejected(self):
        X = np.zeros((5, 3))
        with pytest.raises(ValueError):
            fit_linear_probe(X, np.zeros(5, dtype=np.int64), 1.0)

    def test_non_finite_rejected(self):
        X, y = separable_data(n_per_class=5)
        X[0, 0] = np.nan
        with pytest.raises((ValueError, NonFiniteError)):
            fit_linear_probe(X, y, 1.0)

    def test_iteration_cap_reported(self):
        X, y = separable_data(n_per_class=10, sep=2.0)
        probe = fit_linear_probe(X, y, 0.5, max_iterations=2)
        assert probe.iterations <= 2
        assert not probe.converged

    def test_huge_lambda_crushes_weights(self):
        X, y = separable_data(n_per_class=10)
        probe = fit_linear_probe(X, y, 1e6)
        assert np.abs(probe.weights).max() <= 1e-3

    def test_convexity_beats_random_restarts(self):
        # Convex objective: restarts land at the same optimum within 1e-8.
        X, y = separable_data(n_per_class=12, sep=2.0, seed=3)
        lam = probe_lambda(8, 3)
        probe = fit_linear_probe(X, y, lam)
        x_star = np.concatenate([probe.weights.ravel(), probe.bias])
        f_star, _ = probe_objective(x_star, X, y, lam, 3)
        rng = RngStream(17)
        for r in range(10):
            x0 = rng.substream(r).normal(x_star.size)
            from digebench.numerics import lbfgs_minimize
            res = lbfgs_minimize(lambda v: probe_objective(v, X, y, lam, 3), x0)
            assert f_star <= res.fun + 1e-8


class TestSimpleShot:
    def _bank(self, sep=8.0, per_class=30, seed=1):
        X, y = separable_data(n_per_class=per_class, sep=sep, seed=seed)
        return bank_from_labels(X, y)

    def test_separable_bank_perfect(self):
        result = simpleshot_episode(self._bank(), EpisodeSpec(3, 5, 10, seed=0))
        assert result.accuracy == 1.0

    def test_accuracy_range_and_determinism(self):
        bank = self._bank(sep=1.0)
        a = simpleshot_episode(bank, EpisodeSpec(3, 2, 10, seed=5))
        b = simpleshot_episode(bank, EpisodeSpec(3, 2, 10, seed=5))
        assert 0.0 <= a.accuracy <= 1.0
        assert a.accuracy == b.accuracy

    def test_sign_flip_invariance(self):
        # Diagonal +-1 rotation is orthogonal and exact in floats.
        bank = self._bank(sep=2.0)
        signs = np.where(np.arange(8) % 2 == 0, 1.0, -1.0)
        flipped = [cls * signs for cls in bank]
        spec = EpisodeSpec(3, 4, 12, seed=9)
        assert simpleshot_episode(bank, spec).accuracy == \
               simpleshot_episode(flipped, spec).accuracy

    def test_episode_spec_validation(self):
        with pytest.raises(ValueError):
            EpisodeSpec(1, 5)
        with pytest.raises(ValueError):
            EpisodeSpec(3, 0)

    def test_insufficient_class_size_rejected(self):
        bank = self._bank(per_class=5)
        with pytest.raises(ValueError):
            simpleshot_episode(bank, EpisodeSpec(3, 4, 15, seed=0))

    def test_query_identical_to_support_is_recovered(self):
        # Each class holds two copies of one unit vector: the query always
        # lands exactly on its own transformed prototype.
        e1, e2 = np.eye(2)
        bank = [np.stack([e1, e1]), np.stack([e2, e2])]
        result = simpleshot_episode(bank, EpisodeSpec(2, 1, 1, seed=4))
        assert result.accuracy == 1.0

    def test_high_separation_sixteen_shot_near_perfect(self):
        bank = self._bank(sep=6.0, per_class=40, seed=12)
        result = simpleshot_episode(bank, EpisodeSpec(3, 16, 15, seed=2))
        assert result.accuracy >= 0.99


class TestRunFewshot:
    def test_median_monotone_on_separable_bank(self):
        bank = bank_from_labels(*separable_data(n_per_class=40, sep=3.0, seed=2))
        results = run_fewshot(bank, [1, 4, 16], episodes=150, seed=3)
        meds = [results[k].median for k in (1, 4, 16)]
        assert meds[0] <= meds[1] <= meds[2]

    def test_quartiles_ordered(self):
        bank = bank_from_labels(*separable_data(n_per_class=40, sep=1.5, seed=4))
        results = run_fewshot(bank, [2], episodes=100, seed=5)
        s = results[2]
        assert s.min <= s.q25 <= s.median <= s.q75 <= s.max
        assert s.episodes == 100

    def test_unsatisfiable_shot_skipped_with_warning(self):
        bank = bank_from_labels(*separable_data(n_per_class=20, seed=6))
        with pytest.warns(UserWarning, match="skipping shot"):
            results = run_fewshot(bank, [1, 50], episodes=20, seed=7)
        assert 1 in results and 50 not in results

    def test_deterministic(self):
        bank = bank_from_labels(*separable_data(n_per_class=25, sep=1.0, seed=8))
        a = run_fewshot(bank, [1, 2], episodes=50, seed=11)
        b = run_fewshot(bank, [1, 2], episodes=50, seed=11)
        assert a[1].median == b[1].median
        assert a[2].q75 == b[2].q75


class TestPrototypes:
    def test_prototypes_are_class_means(self):
        X, y = separable_data(n_per_class=10)
        index = build_prototypes(X, y)
        for c in range(3):
            np.testing.assert_allclose(index.prototypes[c], X[y == c].mean(axis=0),
                                       atol=1e-12)

    def test_empty_class_rejected(self):
        X = np.ones((4, 3))
        y = np.array([0, 0, 2, 2])
        with pytest.raises(ValueError):
            build_prototypes(X, y)

    def test_classification_matches_cosine_argmax(self):
        X, y = separable_data()
        index = build_prototypes(X, y)
        hits = 0
        for row, label in zip(X, y):
            pred, sims = classify_by_prototype(row, index)
            assert sims.shape == (3,)
            hits += pred == label
        assert hits == len(y)

    def test_zero_norm_query_gets_zero_similarity(self):
        X, y = separable_data(n_per_class=5)
        index = build_prototypes(X, y)
        pred, sims = classify_by_prototype(np.zeros(8), index)
        np.testing.assert_array_equal(sims, 0.0)
        assert pred == 0  # tie broken toward the lowest index

    def test_query_scale_invariance(self):
        X, y = separable_data(n_per_class=5)
        index = build_prototypes(X, y)
        q = X[3]
        pred_a, sims_a = classify_by_prototype(q, index)
        pred_b, sims_b = classify_by_prototype(200.0 * q, index)
        assert pred_a == pred_b
        np.testing.assert_allclose(sims_a, sims_b, atol=1e-12)

    def test_topk_ordering_and_tie_break(self):
        index = build_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]),
                                 np.array([0, 1]))
        cands = np.array([[2.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        got = topk_nearest_to_prototype(0, index, cands, k=3)
        ids = [i for i, _ in got]
        sims = [s for _, s in got]
        # Two candidates tie at similarity 1; ascending id breaks the tie.
        assert ids[:2] == [0, 1]
        assert sims[0] == sims[1] == pytest.approx(1.0)
        assert sims == sorted(sims, reverse=True)

    def test_topk_full_ordering_at_k_equals_count(self):
        index = build_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]),
                                 np.array([0, 1]))
        cands = np.array([[1.0, 0.2], [0.9, 0.1]])
        got = topk_nearest_to_prototype(0, index, cands,
                                        candidate_ids=["a", "b"], k=2)
        assert len(got) == 2
        assert {i for i, _ in got} == {"a", "b"}

    def test_topk_rejects_k_beyond_candidates(self):
        index = build_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]),
                                 np.array([0, 1]))
        with pytest.raises(ValueError):
            topk_nearest_to_prototype(0, index, np.array([[1.0, 0.0]]), k=5)

    def test_topk_prototype_itself_ranks_first(self):
        X = np.array([[2.0, 0.0], [4.0, 0.0], [0.0, 3.0]])
        y = np.array([0, 0, 1])
        index = build_prototypes(X, y)
        cands = np.vstack([np.array([[0.5, 0.5]]), index.prototypes[0][None, :]])
        got = topk_nearest_to_prototype(0, index, cands, k=2)
        assert got[0][0] == 1
        assert got[0][1] == pytest.approx(1.0)

    def test_bad_class_index(self):
        index = build_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]),
                                 np.array([0, 1]))
        with pytest.raises(ValueError):
            topk_nearest_to_prototype(5, index, np.array([[1.0, 0.0]]))
