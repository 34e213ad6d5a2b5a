"""Observation tensors built from a training corpus.

Three sparse tensors are built here: the user x item x feature tensor
(with the overall rating appended as an extra feature slice) and the two
user/item x feature x opinion phrase tensors. The per-user pairwise
preference sets used by the ranking term are built here too.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .corpus import IndexedCorpus
from .errors import ConfigError, ShapeError


class SparseTensor3:
    """Three-way non-negative tensor in coordinate format.

    Only observed cells are stored. Coordinates are kept sorted
    lexicographically so two tensors built from the same data compare equal.
    """

    def __init__(self, dims, coords, values):
        self.dims = tuple(int(d) for d in dims)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(coords) != len(values):
            raise ShapeError(f"{len(coords)} coordinates but {len(values)} values")
        if len(coords):
            if (coords < 0).any() or (coords >= np.array(self.dims)).any():
                raise ShapeError(f"coordinate out of range for dims {self.dims}")
            if (values < 0).any() or not np.isfinite(values).all():
                raise ValueError("tensor values must be finite and non-negative")
        order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        coords, values = coords[order], values[order]
        if len(coords) > 1 and (np.diff(coords, axis=0) == 0).all(axis=1).any():
            raise ValueError("duplicate coordinates")
        coords.flags.writeable = False
        values.flags.writeable = False
        self.coords = coords
        self.values = values

    @property
    def nnz(self) -> int:
        return len(self.values)

    def __len__(self):
        return self.nnz

    def __iter__(self):
        for c, v in zip(self.coords, self.values):
            yield (int(c[0]), int(c[1]), int(c[2])), float(v)

    def __eq__(self, other):
        return (
            isinstance(other, SparseTensor3)
            and self.dims == other.dims
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"SparseTensor3(dims={self.dims}, nnz={self.nnz})"

    def get(self, i1, i2, i3, default=0.0) -> float:
        key = np.array([i1, i2, i3])
        lo = np.searchsorted(self._flat(), np.ravel_multi_index(key, self.dims))
        if lo < self.nnz and (self.coords[lo] == key).all():
            return float(self.values[lo])
        return default

    def _flat(self):
        return np.ravel_multi_index(self.coords.T, self.dims) if self.nnz else np.empty(0, np.int64)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dims)
        out[tuple(self.coords.T)] = self.values
        return out

    @classmethod
    def from_dict(cls, dims, cells: dict) -> "SparseTensor3":
        if not cells:
            return cls(dims, np.empty((0, 3), np.int64), np.empty(0))
        keys = list(cells)
        return cls(dims, keys, [cells[k] for k in keys])

    def subset(self, mask) -> "SparseTensor3":
        return SparseTensor3(self.dims, self.coords[mask], self.values[mask])

    def dump(self, path) -> None:
        """Write ``i1 i2 i3 value`` lines; debugging aid only."""
        with open(path, "w") as fh:
            for (a, b, c), v in self:
                fh.write(f"{a} {b} {c} {v!r}\n")


def map_feature_score(score, max_rating):
    """Squash a summed polarity score into ``(1, N)``."""
    score = np.asarray(score, dtype=np.float64)
    return 1.0 + (max_rating - 1.0) / (1.0 + np.exp(-score))


def map_phrase_frequency(freq, max_rating):
    """Map a phrase count ``>= 1`` into ``[1, N)``; a count of 0 maps to 0."""
    freq = np.asarray(freq, dtype=np.float64)
    mapped = 1.0 + (max_rating - 1.0) * (2.0 / (1.0 + np.exp(-freq)) - 1.0)
    return np.where(freq > 0, mapped, 0.0)


@dataclass
class FeatureScoreTable:
    """Summed polarity ``score`` and mention count per (user, item, feature)."""

    shape: tuple[int, int, int]
    scores: dict[tuple[int, int, int], int]
    counts: dict[tuple[int, int, int], int]

    def __len__(self):
        return len(self.scores)

    def __getitem__(self, key):
        return self.scores[key], self.counts[key]

    def __contains__(self, key):
        return key in self.scores


def aggregate_feature_scores(train: IndexedCorpus) -> FeatureScoreTable:
    scores: dict[tuple[int, int, int], int] = defaultdict(int)
    counts: dict[tuple[int, int, int], int] = defaultdict(int)
    for r in train.reviews:
        for f, _o, s in r.tuples:
            key = (r.user, r.item, f)
            scores[key] += s
            counts[key] += 1
    return FeatureScoreTable((train.m, train.n, train.p), dict(scores), dict(counts))


def build_x(scores: FeatureScoreTable, ratings: dict, max_rating: int) -> SparseTensor3:
    """User x item x (feature + dummy) tensor.

    Mentioned features hold the squashed polarity score; the last slice
    (index ``p``) holds the overall rating of every rated (user, item).
    """
    if max_rating < 2:
        raise ConfigError(f"max rating must be >= 2, got {max_rating}")
    m, n, p = scores.shape
    cells = {}
    if scores.scores:
        keys = list(scores.scores)
        vals = map_feature_score([scores.scores[k] for k in keys], max_rating)
        cells.update(zip(keys, vals.tolist()))
    for (i, j), rating in ratings.items():
        cells[(i, j, p)] = float(rating)
    return SparseTensor3.from_dict((m, n, p + 1), cells)


def _build_phrase_tensor(train: IndexedCorpus, max_rating: int, by_item: bool) -> SparseTensor3:
    if max_rating < 2:
        raise ConfigError(f"max rating must be >= 2, got {max_rating}")
    freq = Counter()
    for r in train.reviews:
        owner = r.item if by_item else r.user
        for f, o, s in r.tuples:
            if s > 0:
                freq[(owner, f, o)] += 1
    rows = train.n if by_item else train.m
    keys = list(freq)
    vals = map_phrase_frequency([freq[k] for k in keys], max_rating) if keys else []
    return SparseTensor3.from_dict((rows, train.p, train.q), dict(zip(keys, np.asarray(vals).tolist())))


def build_yu(train: IndexedCorpus, max_rating: int) -> SparseTensor3:
    """User x feature x opinion tensor over positive phrases only."""
    return _build_phrase_tensor(train, max_rating, by_item=False)


def build_yi(train: IndexedCorpus, max_rating: int) -> SparseTensor3:
    """Item x feature x opinion tensor over positive phrases only."""
    return _build_phrase_tensor(train, max_rating, by_item=True)


@dataclass
class PairOrderSet:
    """Per-user item preference pairs.

    ``pairs[i]`` lists the explicit (preferred, other) pairs among the items
    user ``i`` rated, with strictly higher rating first. Pairs of a rated
    item against an unrated one are not materialised; ``rated`` and
    ``n_items`` let a sampler draw them on demand.
    """

    n_items: int
    rated: list[dict[int, int]]
    pairs: list[list[tuple[int, int]]]
    review_counts: np.ndarray

    @property
    def n_users(self) -> int:
        return len(self.rated)

    def __contains__(self, key) -> bool:
        """Membership in the full preference set, implicit pairs included."""
        i, j, l = key
        ratings = self.rated[i]
        if j not in ratings:
            return False
        if l not in ratings:
            return 0 <= l < self.n_items
        return ratings[j] > ratings[l]

    def iter_all(self, user: int):
        """Yield every (j, l) in the user's full preference set."""
        ratings = self.rated[user]
        yield from self.pairs[user]
        unrated = [l for l in range(self.n_items) if l not in ratings]
        for j in ratings:
            for l in unrated:
                yield j, l


def build_pair_sets(train: IndexedCorpus) -> PairOrderSet:
    ratings = train.ratings()
    rated: list[dict[int, int]] = [{} for _ in range(train.m)]
    for (i, j), a in ratings.items():
        rated[i][j] = a
    pairs = []
    for user_ratings in rated:
        items = sorted(user_ratings)
        pairs.append([
            (j, l) for j in items for l in items if user_ratings[j] > user_ratings[l]
        ])
    counts = np.zeros(train.m, dtype=np.int64)
    for r in train.reviews:
        counts[r.user] += 1
    return PairOrderSet(train.n, rated, pairs, counts)


@dataclass
class TrainingTensors:
    x: SparseTensor3
    yu: SparseTensor3
    yi: SparseTensor3
    pairs: PairOrderSet


def build_all(train: IndexedCorpus) -> TrainingTensors:
    N = train.max_rating
    return TrainingTensors(
        x=build_x(aggregate_feature_scores(train), train.ratings(), N),
        yu=build_yu(train, N),
        yi=build_yi(train, N),
        pairs=build_pair_sets(train),
    )
