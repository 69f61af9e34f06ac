"""Greedy word-swap attack and target-relative score decrease.

Source positions are visited once, in descending salience (likelihood drop
of the reference when the token is deleted). At each position the nearest
embedding neighbours of the original token are tried in order; the first
one that strictly lowers the BLEU of the greedy output is kept. The attack
ends when BLEU reaches 0, the edit budget is spent, or positions run out.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .metrics import ParentScore, TableRecord, bleu, edit_distance, parent_lite
from .model import NUM_SPECIAL, Seq2Seq, is_special, with_eos


@dataclass(frozen=True)
class AttackBudget:
    max_edit_distance: int = 30
    neighbor_count: int = 10
    skip_threshold: float = 0.5
    best_of_n: bool = False

    def __post_init__(self):
        # a zero edit budget is allowed: it turns the attack into a no-op
        if self.max_edit_distance < 0 or self.neighbor_count < 1:
            raise ValueError("max_edit_distance must be >= 0 and neighbor_count positive")
        if not 0.0 <= self.skip_threshold <= 1.0:
            raise ValueError("skip_threshold must lie in [0, 1]")


@dataclass
class Swap:
    position: int
    old: int
    new: int
    bleu_after: float


@dataclass
class AttackResult:
    x: list[int]
    x_adv: list[int]
    y_clean: list[int]
    y_adv: list[int]
    bleu_clean: float
    bleu_adv: float
    accepted_swaps: list[Swap] = field(default_factory=list)
    skipped: bool = False
    reason: str = ""

    @property
    def edit_distance(self) -> int:
        return edit_distance(self.x, self.x_adv)

    def swap_string(self, decode: Callable[[int], str] = str) -> str:
        return ",".join(f"{s.position}:{decode(s.old)}→{decode(s.new)}" for s in self.accepted_swaps)


def relative_decrease(clean: float, adv: float, higher_is_better: bool = True) -> float | None:
    """(clean - adv) / clean; ``None`` when clean is 0. Negated for lower-is-better metrics."""
    if clean == 0:
        return None
    d = (clean - adv) / clean
    return d if higher_is_better else -d


def salience_scores(model: Seq2Seq, x: Sequence[int], y_ref: Sequence[int]) -> list[float]:
    """log p(y_ref | x) - log p(y_ref | x without position i); specials score -inf.

    ``y_ref`` is scored exactly as given; :func:`attack` appends EOS first.
    """
    x = [int(t) for t in x]
    if not x or len(y_ref) == 0:
        raise ValueError("salience needs non-empty x and y_ref")
    y = np.asarray(y_ref, dtype=np.int64)
    base = model.sequence_logprob(np.asarray(x), y)
    scores = [-math.inf] * len(x)
    live = [i for i, t in enumerate(x) if not is_special(t)]
    if len(x) == 1:
        return scores
    if live:
        cut = np.array([x[:i] + x[i + 1 :] for i in live], dtype=np.int64)
        lp = model.sequence_logprobs(cut, np.tile(y, (len(live), 1)))
        for i, v in zip(live, lp):
            scores[i] = float(base - v)
    return scores


def nearest_neighbors(embeddings: np.ndarray, token: int, n: int) -> list[int]:
    """The ``n`` closest non-special tokens other than ``token`` (Euclidean, ties to smaller id)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if not 0 <= token < emb.shape[0]:
        raise ValueError(f"token id {token} outside vocabulary of {emb.shape[0]}")
    if n >= emb.shape[0]:
        raise ValueError("n must be smaller than the vocabulary size")
    cand = np.array([i for i in range(NUM_SPECIAL, emb.shape[0]) if i != token], dtype=np.int64)
    dist = np.linalg.norm(emb[cand] - emb[token], axis=1)
    return [int(c) for c in cand[np.lexsort((cand, dist))][:n]]


def attack(model: Seq2Seq, x: Sequence[int], y_ref: Sequence[int], budget: AttackBudget | None = None) -> AttackResult:
    budget = budget or AttackBudget()
    x = [int(t) for t in x]
    y_ref = [int(t) for t in y_ref]
    y0 = model.greedy_decode(np.asarray(x))
    b0 = bleu(y0, y_ref)
    res = AttackResult(x, list(x), y0, list(y0), b0, b0)
    if b0 < budget.skip_threshold:
        res.skipped, res.reason = True, f"initial BLEU {b0:.4f} below {budget.skip_threshold}"
        return res
    scores = salience_scores(model, x, with_eos(y_ref))
    order = [i for i in sorted(range(len(x)), key=lambda i: (-scores[i], i)) if scores[i] != -math.inf]
    emb = model.embedding_vectors()
    cur, cur_bleu, cur_y = list(x), b0, y0
    changed = 0
    for pos in order:
        if cur_bleu == 0.0 or changed >= budget.max_edit_distance:
            break
        neigh = nearest_neighbors(emb, x[pos], budget.neighbor_count)
        trials = np.array([cur[:pos] + [w] + cur[pos + 1 :] for w in neigh], dtype=np.int64)
        outs = model.greedy_decode_batch(trials)
        scores_b = [bleu(o, y_ref) for o in outs]
        pick = None
        if budget.best_of_n:
            j = int(np.argmin(scores_b))
            pick = j if scores_b[j] < cur_bleu else None
        else:
            pick = next((j for j, s in enumerate(scores_b) if s < cur_bleu), None)
        if pick is None:
            continue
        cur = list(trials[pick])
        cur = [int(t) for t in cur]
        cur_bleu, cur_y = scores_b[pick], outs[pick]
        changed += 1
        res.accepted_swaps.append(Swap(pos, x[pos], neigh[pick], cur_bleu))
    res.x_adv, res.y_adv, res.bleu_adv = cur, list(cur_y), cur_bleu
    return res


@dataclass
class MetricSummary:
    clean: float
    adv: float
    d: float | None


@dataclass
class RobustnessReport:
    metrics: dict[str, MetricSummary]
    count: int
    attacked: int
    skip_rate: float
    meaning_preservation: float | None
    mean_edit_distance: float
    results: list[AttackResult] = field(default_factory=list, repr=False)

    def d(self, metric: str = "bleu") -> float | None:
        return self.metrics[metric].d if metric in self.metrics else None


def _attack_one(args):
    model, x, y, budget = args
    return attack(model, x, y, budget)


def attack_all(model: Seq2Seq, pairs: Sequence[tuple], budget: AttackBudget, workers: int = 1) -> list[AttackResult]:
    """Attack every (x, y_ref) pair; ``workers > 1`` spreads samples over processes."""
    if workers <= 1 or len(pairs) < 2:
        return [attack(model, x, y, budget) for x, y in pairs]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(_attack_one, [(model, x, y, budget) for x, y in pairs], chunksize=8))


def robustness_eval(
    model: Seq2Seq,
    pairs: Sequence[tuple],
    budget: AttackBudget | None = None,
    tables: Sequence[TableRecord] | None = None,
    stop_words: Sequence[int] = (),
    same_cluster: Callable[[int, int], bool] | None = None,
    workers: int = 1,
) -> RobustnessReport:
    """Attack every sample and compare metrics on clean vs adversarial outputs.

    Means and d are taken over attacked (not skipped) samples. With
    ``tables`` the parent_lite precision/recall/F1 are reported as well.
    """
    budget = budget or AttackBudget()
    if not pairs:
        return RobustnessReport({}, 0, 0, 0.0, None, 0.0)
    results = attack_all(model, pairs, budget, workers)
    live = [i for i, r in enumerate(results) if not r.skipped]
    metrics: dict[str, MetricSummary] = {}
    if live:
        ys = [list(pairs[i][1]) for i in live]
        clean = [results[i].bleu_clean for i in live]
        adv = [results[i].bleu_adv for i in live]
        cm, am = float(np.mean(clean)), float(np.mean(adv))
        metrics["bleu"] = MetricSummary(cm, am, relative_decrease(cm, am))
        if tables is not None:
            pc = [parent_lite(results[i].y_clean, tables[i], y, stop_words) for i, y in zip(live, ys)]
            pa = [parent_lite(results[i].y_adv, tables[i], y, stop_words) for i, y in zip(live, ys)]
            for j, name in enumerate(("parent_precision", "parent_recall", "parent_f1")):
                c = float(np.mean([p.as_tuple()[j] for p in pc]))
                a = float(np.mean([p.as_tuple()[j] for p in pa]))
                metrics[name] = MetricSummary(c, a, relative_decrease(c, a))
    swaps = [s for r in results for s in r.accepted_swaps]
    mp = None
    if same_cluster is not None and swaps:
        mp = float(np.mean([same_cluster(s.old, s.new) for s in swaps]))
    return RobustnessReport(
        metrics,
        len(results),
        len(live),
        1.0 - len(live) / len(results),
        mp,
        float(np.mean([r.edit_distance for r in results])),
        results,
    )


def dump_line(sample_id: int, r: AttackResult, decode: Callable[[int], str] = str) -> str:
    return "\t".join(
        [str(sample_id), str(int(r.skipped)), r.swap_string(decode), repr(r.bleu_clean), repr(r.bleu_adv), str(r.edit_distance)]
    )


def clean_parent(model: Seq2Seq, x, table: TableRecord, reference, stop_words=()) -> ParentScore:
    return parent_lite(model.greedy_decode(np.asarray(x)), table, reference, stop_words)
