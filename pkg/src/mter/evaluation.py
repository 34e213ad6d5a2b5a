"""NDCG evaluation, reference baselines and the opinion-usage permutation test."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit

from .corpus import IndexedCorpus, IndexedReview
from .errors import ConfigError, TrainingDivergence
from .explain import rank_desc
from .tensors import build_pair_sets
from .training import PairSampler, TrainConfig

log = logging.getLogger(__name__)

DEFAULT_KS = (10, 20, 50, 100)


def _gain(g, kind):
    g = np.asarray(g, dtype=np.float64)
    if kind == "exp":
        return np.exp2(g) - 1.0
    if kind == "linear":
        return g
    raise ConfigError(f"unknown gain type {kind!r}")


def ndcg_at_k(ranked, gains: dict, k: int, gain: str = "exp") -> float:
    """NDCG of the first ``k`` entries of ``ranked`` against graded ``gains``.

    Ids missing from ``gains`` have gain 0. Returns 0 when no id has a
    positive gain.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    top = list(ranked)[:k]
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    got = _gain([gains.get(i, 0) for i in top], gain)
    dcg = float(got @ discounts[:len(got)])
    ideal = np.sort(_gain(list(gains.values()), gain))[::-1][:k]
    idcg = float(ideal @ discounts[:len(ideal)])
    return dcg / idcg if idcg > 0 else 0.0


def _scorer(obj):
    if hasattr(obj, "overall_scores"):
        return obj.overall_scores
    if hasattr(obj, "scores"):
        return obj.scores
    if callable(obj):
        return obj
    raise TypeError(f"cannot score items with {type(obj).__name__}")


def rank_candidates(scores, exclude) -> np.ndarray:
    """Rank every item not in ``exclude`` by descending score."""
    order = rank_desc(scores)
    if not exclude:
        return order
    mask = np.ones(len(order), dtype=bool)
    mask[list(exclude)] = False
    return order[mask[order]]


@dataclass
class EvalReport:
    recommendation: dict[int, float] = field(default_factory=dict)
    users: list[int] = field(default_factory=list)
    per_user: dict[int, list[float]] = field(default_factory=dict)
    feature_ndcg: float | None = None
    opinion_ndcg: float | None = None
    feature_k: int = 20
    opinion_k: int = 50

    def to_dict(self) -> dict:
        out = {
            "recommendation": {f"ndcg@{k}": v for k, v in self.recommendation.items()},
            "n_users": len(self.users),
        }
        if self.feature_ndcg is not None:
            out[f"feature_ndcg@{self.feature_k}"] = self.feature_ndcg
        if self.opinion_ndcg is not None:
            out[f"opinion_ndcg@{self.opinion_k}"] = self.opinion_ndcg
        out["per_user"] = {"users": self.users, **{f"ndcg@{k}": v for k, v in self.per_user.items()}}
        return out


def gains_by_user(test: IndexedCorpus) -> dict[int, dict[int, int]]:
    """Per-user gains from held-out reviews; repeated reviews keep the highest rating."""
    gains: dict[int, dict[int, int]] = defaultdict(dict)
    for r in test.reviews:
        g = gains[r.user]
        g[r.item] = max(g.get(r.item, 0), r.rating)
    return gains


def eval_recommendation(scorer, train: IndexedCorpus, test: IndexedCorpus, ks=DEFAULT_KS,
                        gain: str = "exp") -> EvalReport:
    """Average per-user NDCG@K of ranking all non-training items.

    ``scorer`` is a :class:`FactorModel`, a baseline with ``scores(user)``,
    or a plain callable returning one score per item.
    """
    score = _scorer(scorer)
    seen = train.items_by_user()
    gains = gains_by_user(test)
    users = sorted(u for u, g in gains.items() if g)
    if not users:
        raise ValueError("no evaluable users: test split is empty")
    per_user = {k: [] for k in ks}
    for u in users:
        ranked = rank_candidates(score(u), seen[u])
        for k in ks:
            per_user[k].append(ndcg_at_k(ranked, gains[u], k, gain))
    return EvalReport(
        recommendation={k: float(np.mean(v)) for k, v in per_user.items()},
        users=users,
        per_user=per_user,
    )


def eval_content_prediction(model, test: IndexedCorpus, feature_k: int = 20,
                            opinion_k: int = 50) -> EvalReport:
    """Feature and opinion-phrase ranking quality on held-out reviews.

    Feature gains are 1 for features mentioned in the review. For each
    mentioned feature, phrase gains are 1 for phrases used positively with
    it; features with no positive phrase are skipped.
    """
    feat_vals, op_vals = [], []
    for r in test.reviews:
        mentioned = {f for f, _, _ in r.tuples}
        if not mentioned:
            continue
        ranked = rank_desc(model.feature_scores(r.user, r.item))
        feat_vals.append(ndcg_at_k(ranked, dict.fromkeys(mentioned, 1), feature_k))
        positive = defaultdict(set)
        for f, o, s in r.tuples:
            if s > 0:
                positive[f].add(o)
        for f in sorted(positive):
            ranked_w = rank_desc(model.phrase_scores(r.user, r.item, f))
            op_vals.append(ndcg_at_k(ranked_w, dict.fromkeys(positive[f], 1), opinion_k))
    return EvalReport(
        feature_ndcg=float(np.mean(feat_vals)) if feat_vals else 0.0,
        opinion_ndcg=float(np.mean(op_vals)) if op_vals else 0.0,
        feature_k=feature_k,
        opinion_k=opinion_k,
    )


class MostPopular:
    """Non-personalised ranking by training review count."""

    def __init__(self, train: IndexedCorpus):
        self.counts = np.bincount([r.item for r in train.reviews], minlength=train.n).astype(np.float64)

    def scores(self, user: int) -> np.ndarray:
        return self.counts

    def ranking(self) -> np.ndarray:
        return rank_desc(self.counts)


def most_popular_baseline(train: IndexedCorpus) -> MostPopular:
    return MostPopular(train)


class BPRMF:
    """Matrix factorisation trained on the pairwise logistic ranking loss."""

    def __init__(self, U: np.ndarray, V: np.ndarray):
        self.U = U
        self.V = V

    def scores(self, user: int) -> np.ndarray:
        return self.V @ self.U[user]

    @staticmethod
    def loss_and_gradients(U, V, pairs, lam):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
        gU, gV = 2 * lam * U, 2 * lam * V
        loss = lam * (float((U * U).sum()) + float((V * V).sum()))
        if len(pairs):
            u, j, l = pairs.T
            diff = V[j] - V[l]
            d = np.einsum("nk,nk->n", U[u], diff)
            loss += float(np.logaddexp(0.0, -d).sum())
            coef = -expit(-d)[:, None]
            np.add.at(gU, u, coef * diff)
            np.add.at(gV, j, coef * U[u])
            np.add.at(gV, l, -coef * U[u])
        return loss, gU, gV


def bprmf_baseline(train: IndexedCorpus, cfg: TrainConfig, nonneg: bool = False,
                   init_std: float = 0.1) -> BPRMF:
    """Fit user / item factors of size ``cfg.dims.a`` by mini-batch SGD.

    Each iteration draws ``cfg.n_s_bpr`` pairs with the same sampler the
    joint model uses and takes one step of size ``cfg.eta``. With
    ``nonneg`` the factors are initialised positive and projected onto the
    non-negative orthant after every step; this variant can lose users
    whose factors hit zero, so it is off by default.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.dims.a
    U = rng.normal(0.0, init_std, (train.m, k))
    V = rng.normal(0.0, init_std, (train.n, k))
    if nonneg:
        U, V = np.abs(U), np.abs(V)
    sampler = PairSampler(build_pair_sets(train))
    for it in range(cfg.t_iter):
        pairs = sampler.sample(rng, max(cfg.n_s_bpr, 1))
        loss, gU, gV = BPRMF.loss_and_gradients(U, V, pairs, cfg.lambda_f)
        if not (np.isfinite(loss) and np.isfinite(gU).all() and np.isfinite(gV).all()):
            raise TrainingDivergence(f"BPRMF diverged at iteration {it}")
        U -= cfg.eta * gU
        V -= cfg.eta * gV
        if nonneg:
            np.maximum(U, 0.0, out=U)
            np.maximum(V, 0.0, out=V)
    return BPRMF(U, V)


def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns ``(t statistic, p-value)``."""
    res = stats.ttest_rel(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return float(res.statistic), float(res.pvalue)


@dataclass
class PermutationReport:
    scope: str
    observed: float
    permuted: list[float]
    p_value: float

    @property
    def permuted_mean(self) -> float:
        return float(np.mean(self.permuted))

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "observed": self.observed,
            "permuted_mean": self.permuted_mean,
            "permuted": self.permuted,
            "p_value": self.p_value,
            "n_perm": len(self.permuted),
        }


def _tuple_arrays(corpus: IndexedCorpus, scope: str):
    if scope not in ("user", "item"):
        raise ConfigError(f"scope must be 'user' or 'item', got {scope!r}")
    ent, feat, op, pol = [], [], [], []
    for r in corpus.reviews:
        owner = r.user if scope == "user" else r.item
        for f, o, s in r.tuples:
            ent.append(owner)
            feat.append(f)
            op.append(o)
            pol.append(s)
    return (np.array(ent, np.int64), np.array(feat, np.int64),
            np.array(op, np.int64), np.array(pol, np.int64))


def _shuffle_within_feature(feat, rng):
    # positions grouped by feature, in original and in random within-group order
    base = np.argsort(feat, kind="stable")
    shuffled = np.lexsort((rng.random(len(feat)), feat))
    perm = np.empty(len(feat), np.int64)
    perm[base] = shuffled
    return perm


def permute_phrases(corpus: IndexedCorpus, rng) -> IndexedCorpus:
    """Swap (opinion, polarity) among all tuples of the same feature, corpus-wide."""
    flat = [(ri, f, o, s) for ri, r in enumerate(corpus.reviews) for f, o, s in r.tuples]
    feat = np.array([t[1] for t in flat], np.int64)
    perm = _shuffle_within_feature(feat, rng)
    per_review = [[] for _ in corpus.reviews]
    for pos, (ri, f, _, _) in enumerate(flat):
        src = flat[perm[pos]]
        per_review[ri].append((f, src[2], src[3]))
    reviews = [
        IndexedReview(r.user, r.item, r.rating, tuple(t)) for r, t in zip(corpus.reviews, per_review)
    ]
    return corpus.with_reviews(reviews)


def phrase_reuse_statistic(ent, feat, op, min_uses: int = 2) -> float:
    """Mean share of the modal phrase over (entity, feature) pairs used ``min_uses``+ times."""
    if not len(ent):
        return 0.0
    n_op = int(op.max()) + 1
    n_feat = int(feat.max()) + 1
    pair_key = ent * n_feat + feat
    keys, counts = np.unique(pair_key * n_op + op, return_counts=True)
    groups = keys // n_op
    starts = np.flatnonzero(np.r_[True, groups[1:] != groups[:-1]])
    modal = np.maximum.reduceat(counts, starts)
    total = np.add.reduceat(counts, starts)
    keep = total >= min_uses
    if not keep.any():
        return 0.0
    return float(np.mean(modal[keep] / total[keep]))


def permutation_test(corpus: IndexedCorpus, scope: str = "user", n_perm: int = 100, seed=0,
                     min_uses: int = 2) -> PermutationReport:
    """Compare modal-phrase reuse against corpora with phrases shuffled per feature.

    The shuffle keeps every feature's phrase counts fixed while breaking any
    link between phrases and the user (or item). The p-value is the share of
    permuted statistics at least as large as the observed one.
    """
    if n_perm <= 0:
        raise ConfigError(f"n_perm must be > 0, got {n_perm}")
    ent, feat, op, _ = _tuple_arrays(corpus, scope)
    if not len(ent):
        raise ValueError("corpus has no opinion tuples")
    rng = np.random.default_rng(seed)
    observed = phrase_reuse_statistic(ent, feat, op, min_uses)
    permuted = []
    for _ in range(n_perm):
        perm = _shuffle_within_feature(feat, rng)
        permuted.append(phrase_reuse_statistic(ent, feat, op[perm], min_uses))
    p_value = float(np.mean(np.array(permuted) >= observed))
    return PermutationReport(scope, observed, permuted, p_value)


def pair_satisfaction(scorer, pairs) -> float:
    """Share of a user's full preference set ordered correctly by ``scorer``.

    ``pairs`` is a :class:`PairOrderSet`; both explicit and rated-vs-unrated
    pairs count.
    """
    score = _scorer(scorer)
    hit = total = 0
    for u in range(pairs.n_users):
        ratings = pairs.rated[u]
        if not ratings:
            continue
        s = score(u)
        rated = np.fromiter(ratings, dtype=np.int64)
        unrated = np.setdiff1d(np.arange(pairs.n_items), rated)
        hit += int((s[rated][:, None] > s[unrated][None, :]).sum())
        total += len(rated) * len(unrated)
        for j, l in pairs.pairs[u]:
            hit += int(s[j] > s[l])
            total += 1
    return hit / total if total else float("nan")
