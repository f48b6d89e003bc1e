"""Logit-gap valence score over positive and negative anchor tokens."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

CONDITIONS = ("good_news", "negative_control")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    name: str
    positive: tuple[str, ...]
    negative: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "positive", tuple(self.positive))
        object.__setattr__(self, "negative", tuple(self.negative))
        if not self.positive or not self.negative:
            raise MetricError(f"anchor set {self.name!r} needs words on both sides")
        both = set(self.positive) & set(self.negative)
        if both:
            raise MetricError(f"anchor set {self.name!r} lists {sorted(both)} on both sides")


ANCHOR_SETS = {
    "default": AnchorSet(
        "default",
        ("congratulations", "happy", "glad", "wonderful", "amazing", "thrilled", "proud", "fantastic", "excellent"),
        ("okay", "noted", "fine", "ordinary", "received", "sorry"),
    ),
    "alt1": AnchorSet(
        "alt1",
        ("great", "awesome", "excited", "delighted", "superb", "impressive", "brilliant", "pleased", "overjoyed", "lucky"),
        ("unfortunately", "sadly", "regret", "disappointing", "difficult", "tough"),
    ),
    "alt2": AnchorSet(
        "alt2",
        ("celebrate", "congratulate", "achievement", "success", "earned", "deserve", "outstanding", "remarkable", "triumph"),
        ("failed", "rejected", "denied", "missed", "lost", "unfortunate"),
    ),
}


TOY_ANCHORS = Path(__file__).with_name("data") / "toy_anchors.json"


def load_anchor_set(name_or_path: str | Path) -> AnchorSet:
    """Return a built-in set by name, or read ``{"name", "positive", "negative"}`` JSON."""
    if str(name_or_path) in ANCHOR_SETS:
        return ANCHOR_SETS[str(name_or_path)]
    # single-character anchors that resolve on the byte-level toy tokenizer
    path = TOY_ANCHORS if str(name_or_path) == "toy" else Path(name_or_path)
    if not path.is_file():
        raise MetricError(f"unknown anchor set {str(name_or_path)!r}")
    raw = json.loads(path.read_text())
    return AnchorSet(raw.get("name", "custom"), raw["positive"], raw["negative"])


@dataclass(frozen=True)
class ResolvedAnchors:
    positive_ids: tuple[int, ...]
    negative_ids: tuple[int, ...]
    source_set: str
    positive_words: tuple[str, ...] = ()
    negative_words: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.positive_ids or not self.negative_ids:
            raise MetricError("resolved anchors must be non-empty on both sides")

    @property
    def valid_counts(self) -> tuple[int, int]:
        return len(self.positive_ids), len(self.negative_ids)

    @property
    def key(self) -> tuple:
        return (self.source_set, self.positive_ids, self.negative_ids)


@dataclass(frozen=True)
class ValenceScore:
    score: float
    per_anchor_logprobs: Mapping[int, float] = field(default_factory=dict)
    anchors_key: tuple = ()


def _log_softmax(logits) -> np.ndarray:
    x = torch.as_tensor(logits).detach().to("cpu", torch.float64).numpy()
    if x.ndim != 1:
        raise MetricError("score expects a single next-token logit vector")
    if not np.isfinite(x).all():
        raise MetricError("logits contain non-finite values")
    m = x.max()
    return x - m - math.log(np.exp(x - m).sum())


def score(logits, anchors: ResolvedAnchors) -> ValenceScore:
    """Mean positive-anchor log-prob minus mean negative-anchor log-prob (nats)."""
    lp = _log_softmax(logits)
    ids = anchors.positive_ids + anchors.negative_ids
    if max(ids) >= lp.shape[0] or min(ids) < 0:
        raise MetricError("anchor id outside the vocabulary")
    pos = [float(lp[i]) for i in anchors.positive_ids]
    neg = [float(lp[j]) for j in anchors.negative_ids]
    s = math.fsum(pos) / len(pos) - math.fsum(neg) / len(neg)
    per = {int(i): float(lp[i]) for i in ids}
    return ValenceScore(s, per, anchors.key)


def score_gap(clean_score: ValenceScore, corrupted_score: ValenceScore) -> float:
    if clean_score.anchors_key != corrupted_score.anchors_key:
        raise MetricError("clean and corrupted scores use different anchors")
    return clean_score.score - corrupted_score.score


def sign_accuracy(gaps: Sequence[float], condition: str) -> float:
    """Fraction of gaps with the sign the condition predicts; zero counts as wrong."""
    if len(gaps) == 0:
        raise MetricError("sign_accuracy needs at least one gap")
    if condition == "good_news":
        hits = sum(1 for g in gaps if g > 0)
    elif condition == "negative_control":
        hits = sum(1 for g in gaps if g < 0)
    else:
        raise MetricError(f"unknown condition {condition!r}")
    return hits / len(gaps)
