import numpy as np
import pytest

from mter.corpus import LexiconEntry, ReviewRecord, index_reviews
from mter.model import Dims, init_model


def E(feature, opinion, polarity=1):
    return LexiconEntry(feature, opinion, polarity)


@pytest.fixture
def lexicon():
    return [
        E("screen", "bright"), E("screen", "dim", -1), E("screen", "sharp"),
        E("battery", "long"), E("battery", "short", -1),
        E("price", "cheap"), E("price", "expensive", -1),
    ]


@pytest.fixture
def records():
    """Small hand-written corpus: 3 users, 3 items, every review parsed."""
    return [
        ReviewRecord("alice", "phone", 5, (E("screen", "bright"), E("battery", "long"))),
        ReviewRecord("alice", "tablet", 3, (E("screen", "dim", -1),)),
        ReviewRecord("bob", "phone", 4, (E("screen", "bright"), E("screen", "sharp"))),
        ReviewRecord("bob", "laptop", 2, (E("battery", "short", -1), E("price", "expensive", -1))),
        ReviewRecord("carol", "tablet", 4, (E("price", "cheap"), E("screen", "bright"))),
        ReviewRecord("carol", "laptop", 5, (E("battery", "long"), E("battery", "long"))),
    ]


@pytest.fixture
def small_corpus(records):
    return index_reviews(records, 5)


@pytest.fixture
def tiny_model():
    return init_model(Dims(3, 2, 2, 3), m=4, n=5, p=3, q=6, seed=11, scale=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
