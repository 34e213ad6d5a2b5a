"""Lexicon and review loading, recursive support filtering, and splitting."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError


class CorpusError(ValueError):
    """Base class for malformed or unusable input data."""


class LexiconParseError(CorpusError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


class ReviewValidationError(CorpusError):
    pass


class EmptyCorpusError(CorpusError):
    pass


@dataclass(frozen=True)
class LexiconEntry:
    feature: str
    opinion: str
    polarity: int

    def __post_init__(self):
        if self.polarity not in (1, -1):
            raise ValueError(f"polarity must be +1 or -1, got {self.polarity!r}")
        if not self.feature or not self.opinion:
            raise ValueError("feature and opinion must be non-empty")


@dataclass(frozen=True)
class ReviewRecord:
    """One review with its extracted (feature, opinion, polarity) tuples.

    ``tuples`` keeps multiplicity: a phrase mentioned twice appears twice.
    """

    user: str
    item: str
    rating: int
    tuples: tuple[LexiconEntry, ...] = ()


@dataclass(frozen=True)
class IndexedReview:
    user: int
    item: int
    rating: int
    # (feature, opinion, polarity) in dense indices
    tuples: tuple[tuple[int, int, int], ...] = ()


@dataclass
class IndexedCorpus:
    """Reviews re-expressed over dense 0-based entity indices.

    Splits of one corpus share the id maps, so ``m, n, p, q`` describe the
    full entity universe even when a split does not touch every entity.
    """

    users: list[str]
    items: list[str]
    features: list[str]
    opinions: list[str]
    reviews: list[IndexedReview]
    max_rating: int
    _lookup: dict = field(default=None, init=False, repr=False, compare=False)

    @property
    def m(self) -> int:
        return len(self.users)

    @property
    def n(self) -> int:
        return len(self.items)

    @property
    def p(self) -> int:
        return len(self.features)

    @property
    def q(self) -> int:
        return len(self.opinions)

    def index_of(self, kind: str, name: str) -> int:
        if self._lookup is None:
            self._lookup = {
                k: {s: i for i, s in enumerate(getattr(self, k))}
                for k in ("users", "items", "features", "opinions")
            }
        try:
            return self._lookup[kind][name]
        except KeyError:
            raise KeyError(f"unknown {kind[:-1]} {name!r}") from None

    def with_reviews(self, reviews: list[IndexedReview]) -> "IndexedCorpus":
        return IndexedCorpus(
            self.users, self.items, self.features, self.opinions, reviews, self.max_rating
        )

    def to_records(self) -> list[ReviewRecord]:
        out = []
        for r in self.reviews:
            tuples = tuple(
                LexiconEntry(self.features[f], self.opinions[o], s) for f, o, s in r.tuples
            )
            out.append(ReviewRecord(self.users[r.user], self.items[r.item], r.rating, tuples))
        return out

    def ratings(self) -> dict[tuple[int, int], int]:
        """Overall rating per (user, item); repeated reviews keep the maximum."""
        out: dict[tuple[int, int], int] = {}
        for r in self.reviews:
            key = (r.user, r.item)
            out[key] = max(out.get(key, r.rating), r.rating)
        return out

    def items_by_user(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.m)]
        for r in self.reviews:
            out[r.user].add(r.item)
        return out


def load_lexicon(path) -> list[LexiconEntry]:
    """Read a ``feature<TAB>opinion<TAB>polarity`` file.

    Blank lines and ``#`` comments are skipped. Duplicates are dropped and
    first-seen order is kept.
    """
    seen: set[LexiconEntry] = set()
    entries: list[LexiconEntry] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise LexiconParseError(path, lineno, f"expected 3 columns, got {len(cols)}")
            feature, opinion, pol = (c.strip() for c in cols)
            try:
                polarity = int(pol)
            except ValueError:
                raise LexiconParseError(path, lineno, f"bad polarity {pol!r}") from None
            if polarity not in (1, -1):
                raise LexiconParseError(path, lineno, f"polarity must be 1 or -1, got {pol!r}")
            if not feature or not opinion:
                raise LexiconParseError(path, lineno, "empty feature or opinion")
            entry = LexiconEntry(feature, opinion, polarity)
            if entry not in seen:
                seen.add(entry)
                entries.append(entry)
    return entries


def _parse_review(obj, lexicon: set[LexiconEntry], max_rating: int, lineno: int) -> ReviewRecord:
    try:
        user, item, rating, phrases = obj["user"], obj["item"], obj["rating"], obj["phrases"]
    except (KeyError, TypeError) as exc:
        raise ReviewValidationError(f"line {lineno}: missing field {exc}") from None
    if isinstance(rating, bool) or not isinstance(rating, (int, float)) or rating != int(rating):
        raise ReviewValidationError(f"line {lineno}: rating must be an integer, got {rating!r}")
    rating = int(rating)
    if not 1 <= rating <= max_rating:
        raise ReviewValidationError(f"line {lineno}: rating {rating} outside [1, {max_rating}]")
    tuples = []
    for ph in phrases:
        try:
            entry = LexiconEntry(str(ph["feature"]), str(ph["opinion"]), int(ph["polarity"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ReviewValidationError(f"line {lineno}: bad phrase {ph!r}: {exc}") from None
        if entry not in lexicon:
            raise ReviewValidationError(
                f"line {lineno}: tuple ({entry.feature!r}, {entry.opinion!r}, {entry.polarity:+d}) "
                "not in lexicon"
            )
        tuples.append(entry)
    return ReviewRecord(str(user), str(item), rating, tuple(tuples))


def load_reviews(path, lexicon: Iterable[LexiconEntry], max_rating: int = 5) -> list[ReviewRecord]:
    if max_rating < 2:
        raise ConfigError(f"max rating must be >= 2, got {max_rating}")
    lex = set(lexicon)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReviewValidationError(f"line {lineno}: invalid JSON: {exc}") from None
            records.append(_parse_review(obj, lex, max_rating, lineno))
    return records


def write_lexicon(path, lexicon: Iterable[LexiconEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in lexicon:
            fh.write(f"{e.feature}\t{e.opinion}\t{e.polarity}\n")


def write_reviews(path, records: Iterable[ReviewRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "user": r.user,
                "item": r.item,
                "rating": r.rating,
                "phrases": [
                    {"feature": t.feature, "opinion": t.opinion, "polarity": t.polarity}
                    for t in r.tuples
                ],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def _filter_once(reviews, min_feature_support, min_review_tuples, min_user_reviews, min_item_reviews):
    support = Counter()
    for r in reviews:
        support.update({t.feature for t in r.tuples})
    kept_features = {f for f, c in support.items() if c >= min_feature_support}

    stage = []
    for r in reviews:
        tuples = tuple(t for t in r.tuples if t.feature in kept_features)
        if len(tuples) >= min_review_tuples:
            stage.append(r if len(tuples) == len(r.tuples) else ReviewRecord(r.user, r.item, r.rating, tuples))

    per_user = Counter(r.user for r in stage)
    per_item = Counter(r.item for r in stage)
    return [
        r for r in stage
        if per_user[r.user] >= min_user_reviews and per_item[r.item] >= min_item_reviews
    ]


def index_reviews(reviews: Sequence[ReviewRecord], max_rating: int) -> IndexedCorpus:
    """Assign dense ids in order of first appearance."""
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    features: dict[str, int] = {}
    opinions: dict[str, int] = {}
    indexed = []
    for r in reviews:
        u = users.setdefault(r.user, len(users))
        i = items.setdefault(r.item, len(items))
        tuples = tuple(
            (features.setdefault(t.feature, len(features)),
             opinions.setdefault(t.opinion, len(opinions)),
             t.polarity)
            for t in r.tuples
        )
        indexed.append(IndexedReview(u, i, r.rating, tuples))
    return IndexedCorpus(list(users), list(items), list(features), list(opinions), indexed, max_rating)


def recursive_filter(
    reviews: Sequence[ReviewRecord],
    min_feature_support: int = 2,
    min_review_tuples: int = 1,
    min_user_reviews: int = 2,
    min_item_reviews: int = 2,
    max_rating: int = 5,
) -> IndexedCorpus:
    """Filter to a fixpoint, then index densely.

    One pass drops features mentioned in fewer than ``min_feature_support``
    reviews, then reviews left with fewer than ``min_review_tuples`` tuples,
    then reviews of users / items with too few surviving reviews. Passes
    repeat until nothing changes.
    """
    thresholds = (min_feature_support, min_review_tuples, min_user_reviews, min_item_reviews)
    if any(t < 0 for t in thresholds):
        raise ConfigError(f"filter thresholds must be >= 0, got {thresholds}")
    current = list(reviews)
    while True:
        nxt = _filter_once(current, *thresholds)
        if nxt == current:
            break
        current = nxt
    if not current:
        raise EmptyCorpusError("empty corpus after filtering")
    return index_reviews(current, max_rating)


def split_corpus(
    corpus: IndexedCorpus,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed=0,
) -> tuple[IndexedCorpus, IndexedCorpus, IndexedCorpus]:
    """Per-user random split into train / validation / test.

    Each user with ``r`` reviews sends ``floor(r * valid)`` reviews to
    validation and ``floor(r * test)`` to test; the rest stay in training,
    so every user keeps at least one training review.
    """
    ratios = tuple(float(x) for x in ratios)
    if len(ratios) != 3 or any(x <= 0 for x in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be 3 positive numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)

    by_user: dict[int, list[int]] = defaultdict(list)
    for pos, r in enumerate(corpus.reviews):
        by_user[r.user].append(pos)

    assign = np.zeros(len(corpus.reviews), dtype=np.int8)
    for user in sorted(by_user):
        positions = np.array(by_user[user])
        count = len(positions)
        n_valid = math.floor(count * ratios[1] + 1e-9)
        n_test = math.floor(count * ratios[2] + 1e-9)
        order = rng.permutation(count)
        assign[positions[order[:n_valid]]] = 1
        assign[positions[order[n_valid:n_valid + n_test]]] = 2

    parts = [[], [], []]
    for pos, r in enumerate(corpus.reviews):
        parts[assign[pos]].append(r)
    return tuple(corpus.with_reviews(p) for p in parts)


def index_with_vocab(records: Sequence[ReviewRecord], users, items, features, opinions,
                     max_rating: int) -> IndexedCorpus:
    """Index ``records`` against fixed id lists; unknown names are an error."""
    base = IndexedCorpus(list(users), list(items), list(features), list(opinions), [], max_rating)
    reviews = []
    try:
        for r in records:
            tuples = tuple(
                (base.index_of("features", t.feature), base.index_of("opinions", t.opinion), t.polarity)
                for t in r.tuples
            )
            reviews.append(IndexedReview(base.index_of("users", r.user), base.index_of("items", r.item),
                                         r.rating, tuples))
    except KeyError as exc:
        raise ReviewValidationError(exc.args[0]) from None
    return base.with_reviews(reviews)


SPLIT_NAMES = ("train", "valid", "test")


def save_splits(directory, lexicon: Iterable[LexiconEntry], splits: Sequence[IndexedCorpus]) -> None:
    """Write ``vocab.json``, ``lexicon.tsv`` and one JSON-lines file per split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = splits[0]
    vocab = {
        "users": first.users, "items": first.items, "features": first.features,
        "opinions": first.opinions, "max_rating": first.max_rating,
    }
    with open(directory / "vocab.json", "w", encoding="utf-8") as fh:
        json.dump(vocab, fh, sort_keys=True)
        fh.write("\n")
    write_lexicon(directory / "lexicon.tsv", lexicon)
    for name, part in zip(SPLIT_NAMES, splits):
        write_reviews(directory / f"{name}.jsonl", part.to_records())


def load_splits(directory) -> tuple[list[LexiconEntry], tuple[IndexedCorpus, ...]]:
    """Inverse of :func:`save_splits`."""
    directory = Path(directory)
    path = directory / "vocab.json"
    if not path.is_file():
        raise CorpusError(f"not a preprocessed data directory (no {path})")
    with open(path, encoding="utf-8") as fh:
        vocab = json.load(fh)
    lexicon = load_lexicon(directory / "lexicon.tsv")
    n_max = int(vocab["max_rating"])
    parts = []
    for name in SPLIT_NAMES:
        records = load_reviews(directory / f"{name}.jsonl", lexicon, n_max)
        parts.append(index_with_vocab(records, vocab["users"], vocab["items"], vocab["features"],
                                      vocab["opinions"], n_max))
    return lexicon, tuple(parts)
