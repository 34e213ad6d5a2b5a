"""Synthetic data with known structure, for tests and sanity checks."""

from __future__ import annotations

import numpy as np

from .corpus import IndexedCorpus, IndexedReview, LexiconEntry, ReviewRecord, index_reviews
from .model import Dims, FactorModel, init_model
from .tensors import SparseTensor3, TrainingTensors, build_pair_sets


def planted_model(dims: Dims, m: int, n: int, p: int, q: int, seed=0, scale: float = 1.0) -> FactorModel:
    return init_model(dims, m, n, p, q, seed, scale)


def dense_reconstruction(model: FactorModel):
    """Full rating, user-phrase and item-phrase tensors implied by ``model``."""
    X = np.einsum("rtv,ir,jt,kv->ijk", model.G1, model.U, model.I, model.F_tilde, optimize=True)
    YU = np.einsum("rvs,ir,kv,ws->ikw", model.G2, model.U, model.F, model.O, optimize=True)
    YI = np.einsum("tvs,jt,kv,ws->jkw", model.G3, model.I, model.F, model.O, optimize=True)
    return X, YU, YI


def dense_to_sparse(arr: np.ndarray, mask=None) -> SparseTensor3:
    coords = np.argwhere(np.ones(arr.shape, bool) if mask is None else mask)
    return SparseTensor3(arr.shape, coords, arr[tuple(coords.T)])


def holdout_tensors(model: FactorModel, frac: float = 0.1, seed=0):
    """Split every dense tensor of ``model`` into observed and held-out cells.

    Returns ``(TrainingTensors, held_out)`` where ``held_out`` maps
    ``"x" / "yu" / "yi"`` to a tensor of the hidden cells.
    """
    rng = np.random.default_rng(seed)
    dense = dict(zip(("x", "yu", "yi"), dense_reconstruction(model)))
    train, held = {}, {}
    for name, arr in dense.items():
        hide = rng.random(arr.shape) < frac
        train[name] = dense_to_sparse(arr, ~hide)
        held[name] = dense_to_sparse(arr, hide)
    m, n = model.U.shape[0], model.I.shape[0]
    empty = IndexedCorpus([str(i) for i in range(m)], [str(j) for j in range(n)], [], [], [], 5)
    return TrainingTensors(train["x"], train["yu"], train["yi"], build_pair_sets(empty)), held


def _feature_names(p):
    return [f"f{k}" for k in range(p)]


def preference_corpus(
    n_users: int = 400,
    n_items: int = 600,
    n_features: int = 16,
    n_opinions: int = 30,
    reviews_per_user: tuple[int, int] = (10, 14),
    mentions_per_review: int = 5,
    n_topics: int = 8,
    n_groups: int = 6,
    selectivity: float = 5.0,
    popularity_skew: float = 0.5,
    contrarian_rate: float = 0.3,
    sentiment_noise: float = 0.1,
    seed=0,
    return_truth: bool = False,
):
    """Reviews whose item choice, ratings and sentiment follow feature preferences.

    Items have a level in ``[0, 1]`` on every feature set by a latent topic.
    Users fall into taste groups: a group fixes which features matter, and
    per feature whether a high or (with probability ``contrarian_rate``) a
    low level is wanted. A user's satisfaction with a feature sets the
    polarity of what they write about it, and the attention-weighted
    satisfaction drives which items they pick and how they rate them.
    Positive phrases follow the writer's group habits and the item topic.

    Returns ``(lexicon, records)``, plus a dict of the latent affinity and
    satisfaction arrays when ``return_truth`` is set.
    """
    rng = np.random.default_rng(seed)
    p, q = n_features, n_opinions
    topic_level = rng.random((n_topics, p))
    item_topic = rng.integers(n_topics, size=n_items)
    level = np.clip(topic_level[item_topic] + rng.normal(0, 0.1, (n_items, p)), 0, 1)

    group = rng.integers(n_groups, size=n_users)
    group_attention = rng.dirichlet(np.full(p, 0.5), n_groups)
    attention = np.array([rng.dirichlet(20.0 * group_attention[g] + 0.01) for g in group])
    group_low = rng.random((n_groups, p)) < contrarian_rate
    flip = rng.random((n_users, p)) < 0.1
    wants_low = group_low[group] ^ flip
    pop = rng.gamma(1.0, 1.0, n_items) ** popularity_skew

    # satisfaction[i, j, k] in [0, 1]
    satisfaction = np.where(wants_low[:, None, :], 1.0 - level[None], level[None])
    affinity = np.einsum("ik,ijk->ij", attention, satisfaction)
    z = (affinity - affinity.mean(axis=1, keepdims=True)) / (affinity.std(axis=1, keepdims=True) + 1e-12)

    # half positive, half negative phrases; each feature uses a subset
    pos_words = [f"good{w}" for w in range(q // 2)]
    neg_words = [f"bad{w}" for w in range(q - q // 2)]
    features = _feature_names(p)
    n_pos = min(6, len(pos_words))
    pos_of = [rng.choice(len(pos_words), size=n_pos, replace=False) for _ in range(p)]
    neg_of = [rng.choice(len(neg_words), size=min(3, len(neg_words)), replace=False) for _ in range(p)]
    lexicon = [LexiconEntry(features[k], pos_words[w], 1) for k in range(p) for w in pos_of[k]]
    lexicon += [LexiconEntry(features[k], neg_words[w], -1) for k in range(p) for w in neg_of[k]]
    group_word = rng.integers(n_pos, size=(n_groups, p))
    topic_word = rng.integers(n_pos, size=(n_topics, p))

    records = []
    for i in range(n_users):
        count = int(rng.integers(reviews_per_user[0], reviews_per_user[1] + 1))
        logits = selectivity * z[i] + np.log(pop)
        prob = np.exp(logits - logits.max())
        prob /= prob.sum()
        chosen = rng.choice(n_items, size=min(count, n_items), replace=False, p=prob)
        for j in chosen:
            rating = int(np.clip(np.rint(3.0 + 1.2 * z[i, j] + rng.normal(0, 0.5)), 1, 5))
            k_count = min(mentions_per_review, int((attention[i] > 0).sum()))
            mentioned = rng.choice(p, size=k_count, replace=False, p=attention[i])
            tuples = []
            for k in mentioned:
                if satisfaction[i, j, k] + rng.normal(0, sentiment_noise) > 0.5:
                    r = rng.random()
                    if r < 0.45:
                        slot = group_word[group[i], k]
                    elif r < 0.9:
                        slot = topic_word[item_topic[j], k]
                    else:
                        slot = rng.integers(n_pos)
                    tuples.append(LexiconEntry(features[k], pos_words[pos_of[k][slot]], 1))
                else:
                    w = neg_of[k][rng.integers(len(neg_of[k]))]
                    tuples.append(LexiconEntry(features[k], neg_words[w], -1))
            records.append(ReviewRecord(f"u{i}", f"i{j}", rating, tuple(tuples)))
    if return_truth:
        return lexicon, records, {"affinity": affinity, "satisfaction": satisfaction}
    return lexicon, records


def phrase_usage_corpus(
    n_users: int = 60,
    n_features: int = 5,
    phrases_per_feature: int = 8,
    uses_per_user: int = 6,
    dependent: bool = True,
    seed=0,
) -> IndexedCorpus:
    """Corpus for the phrase-reuse permutation test.

    With ``dependent=True`` every user has one personal phrase per feature
    and always uses it. Otherwise each use draws a phrase independently from
    a fixed, skewed global popularity for that feature.
    """
    rng = np.random.default_rng(seed)
    popularity = rng.dirichlet(np.ones(phrases_per_feature), n_features)
    records = []
    for u in range(n_users):
        for f in range(n_features):
            personal = (u * 7 + f * 3) % phrases_per_feature
            for t in range(uses_per_user):
                if dependent:
                    w = personal
                else:
                    w = rng.choice(phrases_per_feature, p=popularity[f])
                records.append(ReviewRecord(
                    f"u{u}", f"i{(u + t) % 17}", 4,
                    (LexiconEntry(f"f{f}", f"w{f}_{w}", 1),),
                ))
    return index_reviews(records, 5)


def corpus_from_arrays(users, items, ratings, tuples_per_review, max_rating=5, names=None) -> IndexedCorpus:
    """Build an :class:`IndexedCorpus` directly from index arrays."""
    reviews = [IndexedReview(int(u), int(i), int(r), tuple(t))
               for u, i, r, t in zip(users, items, ratings, tuples_per_review)]
    m = max(users) + 1
    n = max(items) + 1
    p = max((f for t in tuples_per_review for f, _, _ in t), default=-1) + 1
    q = max((o for t in tuples_per_review for _, o, _ in t), default=-1) + 1
    names = names or {}
    return IndexedCorpus(
        names.get("users", [f"u{i}" for i in range(m)]),
        names.get("items", [f"i{j}" for j in range(n)]),
        names.get("features", [f"f{k}" for k in range(p)]),
        names.get("opinions", [f"o{w}" for w in range(q)]),
        reviews, max_rating,
    )
