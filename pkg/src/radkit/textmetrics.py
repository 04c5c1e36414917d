"""Lexical and classification metrics on a 0-100 scale, plus bootstrap intervals.

Tokenization for every lexical metric: lowercase, replace each
non-alphanumeric character with a space, split on whitespace.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from statistics import fmean
from typing import Any, Callable, Sequence, TypeVar

import numpy as np

from radkit.domain import LabelSet, NliLabel
from radkit.errors import EmptyInput, LengthMismatch

logger = logging.getLogger(__name__)

__all__ = [
    "MetricResult",
    "tokenize",
    "lcs_length",
    "rouge_l",
    "bleu_4",
    "token_f1",
    "multilabel_macro_f1",
    "nli_scores",
    "bootstrap_ci",
    "DEFAULT_RESAMPLES",
]

DEFAULT_RESAMPLES = 10

T = TypeVar("T")


@dataclass(frozen=True)
class MetricResult:
    name: str
    point: float
    ci_low: float | None = None
    ci_high: float | None = None
    n: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.point <= 100.0:
            raise ValueError(f"{self.name}: point {self.point} outside [0, 100]")
        if (self.ci_low is None) != (self.ci_high is None):
            raise ValueError(f"{self.name}: interval needs both ends")
        if self.ci_low is not None and self.ci_low > self.ci_high:
            raise ValueError(f"{self.name}: ci_low > ci_high")

    @property
    def brackets_point(self) -> bool:
        if self.ci_low is None:
            return True
        return self.ci_low <= self.point <= self.ci_high

    def format_cell(self) -> str:
        """``66.66 [65.64, 67.48]``, or just the point when there is no interval."""
        if self.ci_low is None:
            return f"{self.point:.2f}"
        return f"{self.point:.2f} [{self.ci_low:.2f}, {self.ci_high:.2f}]"

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n": self.n,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricResult":
        return cls(data["name"], data["point"], data.get("ci_low"), data.get("ci_high"), data.get("n", 0))


def tokenize(text: str) -> list[str]:
    return "".join(ch if ch.isalnum() else " " for ch in text.lower()).split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS F-measure with beta=1."""
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision, recall = lcs / len(cand), lcs / len(ref)
    return 100.0 * 2 * precision * recall / (precision + recall)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_4(candidate: str, reference: str) -> float:
    """Sentence BLEU-4 with brevity penalty, uniform weights.

    No unigram overlap scores 0. An order with zero clipped matches uses
    ``1 / (2 * candidate n-gram count)`` as its precision. Orders the
    candidate is too short to contain are left out of the geometric mean.
    """
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    log_precisions = []
    for n in range(1, min(4, len(cand)) + 1):
        cand_counts = _ngrams(cand, n)
        ref_counts = _ngrams(ref, n)
        matches = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        total = sum(cand_counts.values())
        if matches == 0:
            if n == 1:
                return 0.0
            log_precisions.append(math.log(1.0 / (2 * total)))
        else:
            log_precisions.append(math.log(matches / total))
    c, r = len(cand), len(ref)
    brevity = 1.0 if c > r else math.exp(1 - r / c)
    return min(100.0, 100.0 * brevity * math.exp(fmean(log_precisions)))


def token_f1(candidate: str, reference: str) -> tuple[float, float, float]:
    """Bag-of-tokens (precision, recall, f1)."""
    cand, ref = Counter(tokenize(candidate)), Counter(tokenize(reference))
    if not cand and not ref:
        return 100.0, 100.0, 100.0
    if not cand or not ref:
        return 0.0, 0.0, 0.0
    overlap = sum((cand & ref).values())
    if overlap == 0:
        return 0.0, 0.0, 0.0
    precision = overlap / sum(cand.values())
    recall = overlap / sum(ref.values())
    return 100.0 * precision, 100.0 * recall, 100.0 * 2 * precision * recall / (precision + recall)


def _prf(tp: int, fp: int, fn: int) -> tuple[Fraction, Fraction, Fraction]:
    precision = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    recall = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
    return precision, recall, f1


def _macro(scores: list[tuple[Fraction, Fraction, Fraction]]) -> tuple[float, float, float]:
    # exact rational average, rounded once, so the result does not depend on label order
    n = len(scores)
    p, r, f = (float(100 * sum(s[i] for s in scores) / n) for i in range(3))
    return f, p, r


def multilabel_macro_f1(
    predictions: Sequence[LabelSet], references: Sequence[LabelSet]
) -> tuple[float, float, float]:
    """Macro (f1, precision, recall) over the union of observed labels.

    Labels with an undefined precision or recall score 0 on that quantity.
    When no label occurs anywhere, every prediction matched its (empty)
    reference and the result is 100 across the board.
    """
    if len(predictions) != len(references):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(references)} references")
    universe = set()
    for labels in (*predictions, *references):
        universe |= labels.labels
    if not universe:
        return 100.0, 100.0, 100.0
    tp: Counter = Counter()
    fp: Counter = Counter()
    fn: Counter = Counter()
    for pred, ref in zip(predictions, references):
        for label in pred.labels & ref.labels:
            tp[label] += 1
        for label in pred.labels - ref.labels:
            fp[label] += 1
        for label in ref.labels - pred.labels:
            fn[label] += 1
    return _macro([_prf(tp[label], fp[label], fn[label]) for label in universe])


def nli_scores(
    predictions: Sequence[NliLabel | None], references: Sequence[NliLabel]
) -> tuple[float, float, float]:
    """Macro (f1, precision, recall) over the NLI classes that occur.

    A class counts when it appears among the references or the predictions,
    so a perfect model scores 100 even on single-class data. A ``None``
    prediction (unreadable model answer) is wrong for every class.
    """
    if len(predictions) != len(references):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(references)} references")
    if not references:
        raise EmptyInput("no NLI examples")
    scores = []
    observed = set(references) | {p for p in predictions if p is not None}
    for label in (label for label in NliLabel if label in observed):
        tp = sum(p == label and r == label for p, r in zip(predictions, references))
        fp = sum(p == label and r != label for p, r in zip(predictions, references))
        fn = sum(p != label and r == label for p, r in zip(predictions, references))
        scores.append(_prf(tp, fp, fn))
    return _macro(scores)


def bootstrap_ci(
    per_example_scores: Sequence[T],
    aggregate: Callable[[list[T]], float] = fmean,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> tuple[float, float, float]:
    """Return ``(point, ci_low, ci_high)``.

    ``point`` aggregates the full list. Resample ``i`` draws ``n`` indices with
    replacement from ``numpy.random.default_rng(seed + i)``; the interval is the
    min and max of the resample aggregates. Items may be any type ``aggregate``
    accepts, e.g. (prediction, reference) pairs for corpus-level metrics.
    """
    items = list(per_example_scores)
    if not items:
        raise EmptyInput("bootstrap needs at least one score")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    n = len(items)
    point = aggregate(items)
    draws = []
    for i in range(resamples):
        idx = np.random.default_rng(seed + i).integers(0, n, size=n)
        draws.append(aggregate([items[j] for j in idx]))
    low, high = min(draws), max(draws)
    if not low <= point <= high:
        logger.warning(
            "bootstrap interval [%s, %s] does not contain the point estimate %s (n=%d, seed=%d)",
            low, high, point, n, seed,
        )
    return point, low, high
