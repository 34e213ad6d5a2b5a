"""Top-K recommendation, feature / phrase ranking and text explanations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import FactorModel


def rank_desc(scores) -> np.ndarray:
    """Indices by descending score; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def recommend_topk(model: FactorModel, user: int, train_items, k: int) -> list[tuple[int, float]]:
    """Highest predicted overall ratings among items the user has not trained on."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 <= user < model.U.shape[0]:
        raise IndexError(f"unknown user index {user}")
    scores = model.overall_scores(user)
    order = rank_desc(scores)
    exclude = set(int(j) for j in train_items)
    out = []
    for j in order:
        if int(j) in exclude:
            continue
        out.append((int(j), float(scores[j])))
        if len(out) == k:
            break
    return out


def rank_features(model: FactorModel, user: int, item: int, top_f: int = 3) -> list[tuple[int, float]]:
    if top_f < 1:
        raise ValueError("top_f must be >= 1")
    scores = model.feature_scores(user, item)
    return [(int(k), float(scores[k])) for k in rank_desc(scores)[:top_f]]


def rank_opinions(model: FactorModel, user: int, item: int, feature: int, top_w: int = 3):
    p = model.F.shape[0]
    if feature == p:
        raise ValueError("the overall-rating feature has no opinion phrases")
    if not 0 <= feature < p:
        raise IndexError(f"feature index {feature} out of range [0, {p})")
    if top_w < 1:
        raise ValueError("top_w must be >= 1")
    scores = model.phrase_scores(user, item, feature)
    return [(int(w), float(scores[w])) for w in rank_desc(scores)[:top_w]]


@dataclass(frozen=True)
class ExplanationTemplate:
    """Plain-text layout for a rendered explanation.

    The default produces::

        Recommendation: <item>
        Explanation: Its <feature> is [<p1>] [<p2>].
    """

    header: str = "Recommendation: {item}\nExplanation: "
    sentence: str = "Its {feature} is {phrases}."
    phrase: str = "[{phrase}]"
    phrase_sep: str = " "
    sentence_sep: str = " "

    def sentence_for(self, feature: str, phrases: Sequence[str]) -> str:
        body = self.phrase_sep.join(self.phrase.format(phrase=p) for p in phrases)
        return self.sentence.format(feature=feature, phrases=body)


DEFAULT_TEMPLATE = ExplanationTemplate()


def render_explanation(item: str, features, template: ExplanationTemplate = DEFAULT_TEMPLATE) -> str:
    """Render ``[(feature, [phrase, ...]), ...]`` for one recommended item."""
    features = list(features)
    if not features:
        raise ValueError("need at least one feature to explain")
    sentences = []
    for feature, phrases in features:
        if not phrases:
            raise ValueError(f"feature {feature!r} has no phrases")
        sentences.append(template.sentence_for(feature, phrases))
    return template.header.format(item=item) + template.sentence_sep.join(sentences)


@dataclass
class FeatureExplanation:
    feature: int
    score: float
    phrases: list[tuple[int, float]]


@dataclass
class Recommendation:
    user: int
    items: list[tuple[int, float]]
    explanations: dict[int, list[FeatureExplanation]] = field(default_factory=dict)


def explain_item(model: FactorModel, user: int, item: int, top_f: int = 3, top_w: int = 3):
    return [
        FeatureExplanation(k, s, rank_opinions(model, user, item, k, top_w))
        for k, s in rank_features(model, user, item, top_f)
    ]


def recommend(model: FactorModel, user: int, train_items, k: int = 10, top_f: int = 3,
              top_w: int = 3) -> Recommendation:
    items = recommend_topk(model, user, train_items, k)
    return Recommendation(
        user, items, {j: explain_item(model, user, j, top_f, top_w) for j, _ in items}
    )
