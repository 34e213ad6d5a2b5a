import math
from collections import Counter

import numpy as np
import pytest

from mter.corpus import IndexedCorpus, IndexedReview
from mter.errors import ConfigError
from mter.evaluation import (
    BPRMF, MostPopular, bprmf_baseline, eval_content_prediction, eval_recommendation,
    gains_by_user, ndcg_at_k, paired_ttest, pair_satisfaction, permutation_test, permute_phrases,
    phrase_reuse_statistic,
)
from mter.model import Dims, init_model, opinion_score, predict_x
from mter.synthetic import phrase_usage_corpus
from mter.tensors import build_pair_sets
from mter.training import TrainConfig


def brute_ndcg(ranked, gains, k, exp=True):
    g = (lambda x: 2.0 ** x - 1.0) if exp else (lambda x: float(x))
    dcg = 0.0
    for r, item in enumerate(ranked[:k], start=1):
        dcg += g(gains.get(item, 0)) / math.log2(r + 1)
    ideal = sorted((g(v) for v in gains.values()), reverse=True)[:k]
    idcg = sum(v / math.log2(r + 1) for r, v in enumerate(ideal, start=1))
    return dcg / idcg if idcg > 0 else 0.0


class TestNDCG:
    def test_examples(self):
        assert ndcg_at_k([7, 1, 2], {7: 1}, 1) == 1.0
        assert ndcg_at_k([3, 7], {7: 1}, 2) == pytest.approx(1 / math.log2(3), abs=1e-12)
        assert ndcg_at_k([3, 7], {7: 1}, 2) == pytest.approx(0.63093, abs=5e-6)
        assert ndcg_at_k([1, 2, 3], {}, 3) == 0.0
        assert ndcg_at_k([1, 2, 3], {4: 0}, 3) == 0.0

    def test_brute_force(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 30))
            ranked = list(rng.permutation(n))
            gains = {int(i): int(rng.integers(0, 6)) for i in rng.choice(n, size=rng.integers(0, n + 1), replace=False)}
            k = int(rng.integers(1, 40))
            for exp in (True, False):
                got = ndcg_at_k(ranked, gains, k, "exp" if exp else "linear")
                assert abs(got - brute_ndcg(ranked, gains, k, exp)) <= 1e-12
                assert 0.0 <= got <= 1.0 + 1e-12

    def test_invariant_below_cutoff(self, rng):
        ranked = list(range(20))
        gains = {0: 3, 4: 1, 9: 2}
        base = ndcg_at_k(ranked, gains, 10)
        tail = ranked[10:]
        rng.shuffle(tail)
        assert ndcg_at_k(ranked[:10] + tail, gains, 10) == base

    def test_bad_k_and_gain(self):
        with pytest.raises(ValueError):
            ndcg_at_k([1], {1: 1}, 0)
        with pytest.raises(ConfigError):
            ndcg_at_k([1], {1: 1}, 1, gain="log")


def corpus_of(triples, m, n, tuples=None):
    tuples = tuples or {}
    reviews = [IndexedReview(u, i, r, tuples.get(idx, ())) for idx, (u, i, r) in enumerate(triples)]
    return IndexedCorpus([f"u{x}" for x in range(m)], [f"i{x}" for x in range(n)],
                         ["f0", "f1", "f2"], [f"o{x}" for x in range(6)], reviews, 5)


class TestRecommendationEval:
    def test_oracle_scores_give_one(self):
        train = corpus_of([(0, 0, 5), (1, 1, 4)], 2, 6)
        test = corpus_of([(0, 3, 4), (0, 5, 2), (1, 2, 5)], 2, 6)
        truth = gains_by_user(test)

        def oracle(u):
            s = np.zeros(6)
            for j, g in truth[u].items():
                s[j] = 10 + g
            return s
        rep = eval_recommendation(oracle, train, test, ks=(1, 2, 5))
        assert rep.recommendation == {1: 1.0, 2: 1.0, 5: 1.0}

    def test_macro_average(self):
        train = corpus_of([(0, 0, 5), (1, 0, 5)], 2, 3)
        test = corpus_of([(0, 1, 5), (1, 2, 5)], 2, 3)
        # both users rank item 1 first: user 0 hits, user 1 misses at K=1
        rep = eval_recommendation(lambda u: np.array([0.0, 2.0, 1.0]), train, test, ks=(1,))
        assert rep.per_user[1] == [1.0, 0.0]
        assert rep.recommendation[1] == 0.5

    def test_brute_force_protocol(self, rng):
        model = init_model(Dims(3, 3, 2, 2), 6, 15, 3, 6, seed=rng, scale=1.0)
        train = corpus_of([(u, int(j), int(rng.integers(1, 6))) for u in range(6)
                           for j in rng.choice(15, 4, replace=False)], 6, 15)
        seen = train.items_by_user()
        test_rows = []
        for u in range(5):  # user 5 has no test item
            for j in rng.choice([x for x in range(15) if x not in seen[u]], 2, replace=False):
                test_rows.append((u, int(j), int(rng.integers(1, 6))))
        test = corpus_of(test_rows, 6, 15)
        rep = eval_recommendation(model, train, test, ks=(3, 10))
        assert rep.users == [0, 1, 2, 3, 4]
        for k in (3, 10):
            vals = []
            for u in range(5):
                scores = model.overall_scores(u)
                ranked = sorted((j for j in range(15) if j not in seen[u]), key=lambda j: (-scores[j], j))
                gains = {j: r for uu, j, r in test_rows if uu == u}
                vals.append(brute_ndcg(ranked, gains, k))
            assert abs(rep.recommendation[k] - np.mean(vals)) <= 1e-12

    def test_max_rating_for_repeats(self):
        test = corpus_of([(0, 1, 2), (0, 1, 5)], 1, 3)
        assert gains_by_user(test) == {0: {1: 5}}

    def test_no_users(self):
        train = corpus_of([(0, 0, 5)], 1, 2)
        with pytest.raises(ValueError, match="no evaluable"):
            eval_recommendation(lambda u: np.zeros(2), train, corpus_of([], 1, 2))

    def test_candidates_independent_of_scorer(self, tiny_model):
        train = corpus_of([(0, 0, 5), (0, 1, 3)], 4, 5)
        test = corpus_of([(0, 4, 5)], 4, 5)
        mp = MostPopular(train)
        captured = []
        for scorer in (tiny_model.overall_scores, mp.scores):
            def spy(u, scorer=scorer):
                captured.append(u)
                return scorer(u)
            eval_recommendation(spy, train, test, ks=(5,))
        a = eval_recommendation(tiny_model, train, test, ks=(5,)).per_user[5]
        b = eval_recommendation(mp, train, test, ks=(5,)).per_user[5]
        assert len(a) == len(b) == 1 and captured == [0, 0]

    def test_report_json(self):
        train = corpus_of([(0, 0, 5)], 1, 3)
        test = corpus_of([(0, 1, 5)], 1, 3)
        d = eval_recommendation(lambda u: np.array([0.0, 1.0, 0.5]), train, test, ks=(1, 2)).to_dict()
        assert d["recommendation"] == {"ndcg@1": 1.0, "ndcg@2": 1.0}
        assert d["n_users"] == 1


class TestContentEval:
    def test_top_feature_mentioned(self, tiny_model):
        scores = tiny_model.feature_scores(0, 0)
        top = int(np.argmax(scores))
        test = corpus_of([(0, 0, 4)], 4, 5, {0: ((top, 0, -1),)})
        rep = eval_content_prediction(tiny_model, test)
        assert rep.feature_ndcg == 1.0
        assert rep.opinion_ndcg == 0.0  # no positive phrase: skipped, empty mean

    def test_brute_force(self, rng):
        model = init_model(Dims(2, 3, 2, 3), 4, 5, 3, 6, seed=rng, scale=1.0)
        tuples = {}
        rows = []
        for idx in range(12):
            rows.append((int(rng.integers(4)), int(rng.integers(5)), 3))
            tuples[idx] = tuple((int(rng.integers(3)), int(rng.integers(6)), int(rng.choice([-1, 1])))
                                for _ in range(rng.integers(1, 4)))
        test = corpus_of(rows, 4, 5, tuples)
        rep = eval_content_prediction(model, test, feature_k=2, opinion_k=3)
        fv, ov = [], []
        for idx, (u, i, _) in enumerate(rows):
            ts = tuples[idx]
            franks = sorted(range(3), key=lambda k: (-predict_x(model, u, i, k), k))
            fv.append(brute_ndcg(franks, {f: 1 for f, _, _ in ts}, 2))
            for f in sorted({f for f, _, s in ts if s > 0}):
                wranks = sorted(range(6), key=lambda w: (-opinion_score(model, u, i, f, w), w))
                ov.append(brute_ndcg(wranks, {o: 1 for ff, o, s in ts if ff == f and s > 0}, 3))
        assert abs(rep.feature_ndcg - np.mean(fv)) <= 1e-12
        assert abs(rep.opinion_ndcg - np.mean(ov)) <= 1e-12


class TestBaselines:
    def test_most_popular(self):
        rows = [(u, 2, 5) for u in range(10)] + [(u, 0, 4) for u in range(3)] + [(u, 1, 4) for u in range(3)]
        mp = MostPopular(corpus_of(rows, 10, 4))
        np.testing.assert_array_equal(mp.ranking(), [2, 0, 1, 3])
        np.testing.assert_array_equal(mp.scores(0), mp.scores(9))

    def test_bprmf_separable_toy(self):
        # user 0 prefers item 0, user 1 prefers item 1; full preference set has 2 pairs
        train = corpus_of([(0, 0, 5), (1, 1, 5)], 2, 2)
        cfg = TrainConfig(dims=Dims(2, 2, 2, 2), t_iter=300, eta=0.1, lambda_f=0.001, n_s_bpr=8, seed=0)
        model = bprmf_baseline(train, cfg)
        pairs = build_pair_sets(train)
        assert sorted((u, j, l) for u in range(2) for j, l in pairs.iter_all(u)) == [(0, 0, 1), (1, 1, 0)]
        assert pair_satisfaction(model, pairs) == 1.0

    def test_bprmf_regulariser_gradient(self, rng):
        U, V = rng.random((3, 2)), rng.random((4, 2))
        loss, gU, gV = BPRMF.loss_and_gradients(U, V, np.empty((0, 3)), 0.25)
        np.testing.assert_allclose(gU, 0.5 * U)
        np.testing.assert_allclose(gV, 0.5 * V)
        assert loss == pytest.approx(0.25 * ((U ** 2).sum() + (V ** 2).sum()))

    def test_bprmf_gradient_finite_differences(self, rng):
        U, V = rng.random((3, 2)), rng.random((4, 2))
        pairs = np.array([[0, 1, 2], [2, 3, 0], [0, 1, 3]])
        _, gU, gV = BPRMF.loss_and_gradients(U, V, pairs, 0.1)
        for arr, g in ((U, gU), (V, gV)):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                keep = arr[idx]
                arr[idx] = keep + 1e-6
                up = BPRMF.loss_and_gradients(U, V, pairs, 0.1)[0]
                arr[idx] = keep - 1e-6
                down = BPRMF.loss_and_gradients(U, V, pairs, 0.1)[0]
                arr[idx] = keep
                num[idx] = (up - down) / 2e-6
            np.testing.assert_allclose(g, num, rtol=1e-6)

    def test_bprmf_seeded(self):
        train = corpus_of([(0, 0, 5), (1, 1, 4), (0, 2, 3)], 2, 3)
        cfg = TrainConfig(dims=Dims(2, 2, 2, 2), t_iter=20, seed=5)
        a, b = bprmf_baseline(train, cfg), bprmf_baseline(train, cfg)
        np.testing.assert_array_equal(a.U, b.U)
        np.testing.assert_array_equal(a.V, b.V)

    def test_pair_satisfaction_enumeration(self, tiny_model):
        train = corpus_of([(0, 0, 5), (0, 1, 3), (1, 2, 4), (2, 4, 1), (2, 3, 2)], 4, 5)
        pairs = build_pair_sets(train)
        hit = total = 0
        for u in range(4):
            s = tiny_model.overall_scores(u)
            for j, l in pairs.iter_all(u):
                hit += s[j] > s[l]
                total += 1
        assert pair_satisfaction(tiny_model, pairs) == hit / total

    def test_bprmf_nonneg_option(self):
        train = corpus_of([(0, 0, 5), (1, 1, 4), (0, 2, 3)], 2, 3)
        model = bprmf_baseline(train, TrainConfig(dims=Dims(2, 2, 2, 2), t_iter=50, eta=0.5), nonneg=True)
        assert (model.U >= 0).all() and (model.V >= 0).all()


class TestTTest:
    def test_against_formula(self, rng):
        a, b = rng.random(30), rng.random(30)
        d = a - b
        t = d.mean() / (d.std(ddof=1) / math.sqrt(len(d)))
        got_t, p = paired_ttest(a, b)
        assert got_t == pytest.approx(t)
        assert 0 <= p <= 1


class TestPermutation:
    def test_dependent_corpus(self):
        corpus = phrase_usage_corpus(n_users=30, dependent=True, seed=0)
        rep = permutation_test(corpus, "user", n_perm=50, seed=1)
        assert rep.observed == 1.0
        assert max(rep.permuted) < 1.0
        assert rep.p_value == 0.0
        assert len(rep.permuted) == 50

    def test_permutation_preserves_feature_counts(self):
        corpus = phrase_usage_corpus(n_users=20, dependent=False, seed=3)
        shuffled = permute_phrases(corpus, np.random.default_rng(0))
        count = lambda c: Counter(t for r in c.reviews for t in r.tuples)  # noqa: E731
        assert count(shuffled) == count(corpus)
        assert [len(r.tuples) for r in shuffled.reviews] == [len(r.tuples) for r in corpus.reviews]
        assert [[f for f, _, _ in r.tuples] for r in shuffled.reviews] == \
               [[f for f, _, _ in r.tuples] for r in corpus.reviews]

    def test_statistic_by_hand(self):
        # entity 0 / feature 0 uses phrases a a b -> 2/3; entity 1 uses c once (excluded)
        ent = np.array([0, 0, 0, 1])
        feat = np.array([0, 0, 0, 0])
        op = np.array([0, 0, 1, 2])
        assert phrase_reuse_statistic(ent, feat, op) == pytest.approx(2 / 3)
        assert phrase_reuse_statistic(ent, feat, op, min_uses=1) == pytest.approx((2 / 3 + 1) / 2)

    def test_null_corpus_not_significant(self):
        rep = permutation_test(phrase_usage_corpus(dependent=False, seed=11), "user", n_perm=100, seed=2)
        assert rep.p_value > 0.05

    def test_item_scope_and_report(self):
        rep = permutation_test(phrase_usage_corpus(n_users=10, seed=0), "item", n_perm=5, seed=0)
        d = rep.to_dict()
        assert d["scope"] == "item" and d["n_perm"] == 5 and 0 <= d["p_value"] <= 1

    @pytest.mark.parametrize("kwargs", [{"n_perm": 0}, {"scope": "feature"}])
    def test_config_errors(self, kwargs):
        with pytest.raises(ConfigError):
            permutation_test(phrase_usage_corpus(n_users=5), **kwargs)

    def test_seeded(self):
        corpus = phrase_usage_corpus(n_users=10, dependent=False, seed=1)
        assert permutation_test(corpus, n_perm=10, seed=4).permuted == permutation_test(corpus, n_perm=10, seed=4).permuted
