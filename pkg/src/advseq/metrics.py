"""Sentence BLEU, token Levenshtein distance, perplexity and a set-coverage PARENT variant.

All functions work on sequences of hashable tokens (ids or strings).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence


def _ngrams(seq: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(candidate: Sequence[Hashable], reference: Sequence[Hashable], max_n: int = 4) -> float:
    """Smoothed sentence BLEU in [0, 1].

    Modified n-gram precisions for n = 1..max_n, geometric mean, brevity
    penalty. A zero unigram precision gives 0; a zero match count for n >= 2
    is smoothed to 1 / (count + 1).
    """
    candidate, reference = list(candidate), list(reference)
    if not reference:
        raise ValueError("BLEU needs a non-empty reference")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        ref = _ngrams(reference, n)
        total = sum(cand.values())
        hits = sum(min(c, ref[g]) for g, c in cand.items())
        if n == 1 and hits == 0:
            return 0.0
        p = hits / total if hits > 0 else 1.0 / (total + 1)
        log_sum += math.log(p)
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / max_n)


def edit_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Token-level Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ta in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, tb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ta != tb))
        prev = cur
    return prev[-1]


def perplexity(model, x, y) -> float:
    """exp(-log p(y|x) / |y|)."""
    if len(y) == 0:
        raise ValueError("perplexity needs a non-empty target")
    return math.exp(-model.sequence_logprob(x, y) / len(y))


@dataclass
class TableRecord:
    pairs: list[tuple[Hashable, list[Hashable]]]

    def __post_init__(self):
        keys = [k for k, _ in self.pairs]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate table keys: {keys}")
        if any(len(v) == 0 for _, v in self.pairs):
            raise ValueError("table values must be non-empty")

    @property
    def value_tokens(self) -> list[Hashable]:
        return [t for _, vs in self.pairs for t in vs]

    def linearize(self) -> list[Hashable]:
        """key value(s) key value(s) ... flattening."""
        out: list[Hashable] = []
        for k, vs in self.pairs:
            out.append(k)
            out.extend(vs)
        return out


@dataclass
class ParentScore:
    precision: float
    recall: float
    f1: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.precision, self.recall, self.f1)


def harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def parent_lite(
    generated: Sequence[Hashable],
    table: TableRecord,
    reference: Sequence[Hashable],
    stop_words: Iterable[Hashable] = (),
) -> ParentScore:
    """Set-coverage faithfulness score against a table and a reference.

    precision: share of generated content tokens (not in ``stop_words``)
    found among table values or reference tokens. recall: share of table
    value tokens mentioned in the generation.
    """
    stop = set(stop_words)
    content = [t for t in generated if t not in stop]
    support = set(table.value_tokens) | set(reference)
    precision = sum(t in support for t in content) / len(content) if content else 0.0
    values = table.value_tokens
    gen = set(generated)
    recall = sum(v in gen for v in values) / len(values) if values else 0.0
    return ParentScore(precision, recall, harmonic(precision, recall))
