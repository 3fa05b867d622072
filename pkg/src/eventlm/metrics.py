"""Evaluation metrics and the metric report record."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .errors import DegenerateInput, ShapeMismatch


def _check_pair(a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise ShapeMismatch(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ShapeMismatch("metric inputs are empty")


def rmse(true_intervals: Sequence[float], predicted_intervals: Sequence[float]) -> float:
    _check_pair(true_intervals, predicted_intervals)
    sq = math.fsum((float(t) - float(p)) ** 2 for t, p in zip(true_intervals, predicted_intervals))
    return math.sqrt(sq / len(true_intervals))


def accuracy(true_types: Sequence[str], predicted_types: Sequence[str]) -> float:
    _check_pair(true_types, predicted_types)
    hits = sum(str(t).strip() == str(p).strip() for t, p in zip(true_types, predicted_types))
    return hits / len(true_types)


def tll(logliks: Sequence[float], event_counts: Sequence[int], normalization: str = "per_event") -> float:
    """Aggregate per-sequence log-likelihoods."""
    if len(logliks) != len(event_counts):
        raise ShapeMismatch(f"length mismatch: {len(logliks)} vs {len(event_counts)}")
    if not logliks:
        raise DegenerateInput("no sequences to aggregate")
    total = math.fsum(float(x) for x in logliks)
    if normalization == "total":
        return total
    if normalization == "per_sequence":
        return total / len(logliks)
    if normalization == "per_event":
        n = sum(int(c) for c in event_counts)
        if n == 0:
            raise DegenerateInput("zero events in total; per-event likelihood is undefined")
        return total / n
    raise ValueError(f"unknown normalization {normalization!r}")


_WORD_RE = re.compile(r"\w+|[^\w\s]")


def rouge_tokens(text: str) -> list[str]:
    """Lowercased words, with each punctuation mark as its own token."""
    return _WORD_RE.findall(text.lower())


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(reference: str, candidate: str) -> tuple[float, float, float]:
    """(precision, recall, f1) from the longest common word subsequence."""
    ref, cand = rouge_tokens(reference), rouge_tokens(candidate)
    if not ref or not cand:
        return 0.0, 0.0, 0.0
    lcs = lcs_length(ref, cand)
    if lcs == 0:
        return 0.0, 0.0, 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return p, r, 2 * p * r / (p + r)


def rouge_l_macro(references: Sequence[str], candidates: Sequence[str]) -> float:
    """Mean per-example ROUGE-L F1."""
    _check_pair(references, candidates)
    return math.fsum(rouge_l(r, c)[2] for r, c in zip(references, candidates)) / len(references)


class SentimentScorer:
    """Extension point for sentiment scoring of generated descriptions.

    No lexicon ships with this package; subclass and implement :meth:`score`
    (for example on top of a VADER install) and pass the instance to evaluation.
    """

    def score(self, text: str) -> float:
        raise NotImplementedError(
            "no sentiment lexicon is bundled; subclass SentimentScorer and implement score(text)"
        )


@dataclass
class MetricReport:
    dataset: str
    task: str
    metric: str
    value: float
    n: int
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise DegenerateInput(f"{self.metric} on {self.dataset}/{self.task} has no samples")
        if not math.isfinite(self.value):
            raise DegenerateInput(f"{self.metric} on {self.dataset}/{self.task} is not finite: {self.value}")

    def to_dict(self) -> dict:
        return asdict(self)
