"""Explicit adversarial samples by gradient-directed token swaps.

A target context (spans of ``y`` or all of it) defines the loss L_o(x, Y);
source positions are selected either by the two-norm of that loss's
gradient w.r.t. each source word embedding, or by token overlap with the
context. Each selected token is replaced by the vocabulary entry whose
embedding offset best aligns (cosine) with the gradient at that position.
Special tokens are never selected nor produced; ties resolve to the smaller
index / id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .advgrad import preserved_param_grads
from .model import ENC0, NUM_SPECIAL, PerturbationSite, Seq2Seq, as_batch, is_special
from .objectives import ObjectiveConfig, loss_o, restricted_loss_o

GRAD_FLOOR = 1e-12

Span = tuple[int, int]  # half-open [start, end) over y


@dataclass
class AdvSwapConfig:
    strategy: str = "gradient"  # "gradient" | "overlap"
    target_mode: str = "whole"  # "whole" | "spans"
    k: float = 0.15
    num_spans: int = 2
    span_len: int = 3
    span_retries: int = 20
    shortlist: int | None = None  # restrict the swap search to this many nearest neighbours
    sequential: bool = False  # recompute gradients after every swap

    def __post_init__(self):
        if self.strategy not in ("gradient", "overlap"):
            raise ValueError(f"unknown selection strategy {self.strategy!r}")
        if self.target_mode not in ("whole", "spans"):
            raise ValueError(f"unknown target mode {self.target_mode!r}")
        if not 0.0 < self.k <= 1.0:
            raise ValueError("k must lie in (0, 1]")
        if self.num_spans < 1 or self.span_len < 1:
            raise ValueError("num_spans and span_len must be positive")


@dataclass
class SwapPlan:
    target_context: list[Span]
    selected_positions: list[int]
    replacements: dict[int, int] = field(default_factory=dict)
    strategy: str = "gradient"
    k: float = 0.15


def span_mask(spans: Sequence[Span], length: int) -> np.ndarray:
    mask = np.zeros(length, dtype=bool)
    for a, b in spans:
        mask[a:b] = True
    return mask


def span_tokens(y: Sequence[int], spans: Sequence[Span]) -> list[int]:
    return [int(t) for a, b in spans for t in y[a:b]]


def pick_target_context(
    y: Sequence[int],
    x: Sequence[int],
    mode: str = "whole",
    num_spans: int = 2,
    span_len: int = 3,
    rng: np.random.Generator | None = None,
    retries: int = 20,
) -> list[Span]:
    """Choose the target context: the whole of ``y`` or ``num_spans`` random spans.

    In spans mode every span must share a content token with ``x``; a span
    is redrawn up to ``retries`` times before falling back to the whole of y.
    """
    n = len(y)
    if mode == "whole" or span_len >= n:
        return [(0, n)]
    rng = rng or np.random.default_rng(0)
    src = {int(t) for t in x if not is_special(int(t))}
    spans: list[Span] = []
    for _ in range(num_spans):
        for _ in range(retries):
            a = int(rng.integers(0, n - span_len + 1))
            span = (a, a + span_len)
            if span not in spans and any(int(t) in src for t in y[a : a + span_len]):
                spans.append(span)
                break
        else:
            return [(0, n)]
    return sorted(spans)


def eligible_positions(x: Sequence[int]) -> list[int]:
    return [i for i, t in enumerate(x) if not is_special(int(t))]


def select_word_overlapping(x: Sequence[int], target_tokens: Sequence[int]) -> list[int]:
    """Source positions whose token also occurs in the target context."""
    wanted = {int(t) for t in target_tokens}
    return [i for i, t in enumerate(x) if not is_special(int(t)) and int(t) in wanted]


def rank_by_gradient(x: Sequence[int], token_grads: np.ndarray, k: float) -> list[int]:
    """Top ceil(k * n) eligible positions by per-token gradient two-norm."""
    elig = eligible_positions(x)
    if not elig:
        raise ValueError("no eligible (non-special) source positions to select from")
    count = max(1, math.ceil(k * len(elig) - 1e-9))
    norms = np.linalg.norm(np.asarray(token_grads)[elig], axis=-1)
    order = np.lexsort((np.asarray(elig), -norms))
    return sorted(elig[i] for i in order[:count])


def swap_token(
    embeddings: np.ndarray,
    current: int,
    grad: np.ndarray,
    shortlist: int | None = None,
) -> int:
    """argmax over non-special x_i != current of cos(e_i - e_current, grad)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (emb.shape[1],):
        raise ValueError(f"gradient must have length {emb.shape[1]}, got shape {grad.shape}")
    cand = np.array([i for i in range(NUM_SPECIAL, emb.shape[0]) if i != current], dtype=np.int64)
    if cand.size == 0:
        raise ValueError("vocabulary has fewer than two swappable tokens")
    diffs = emb[cand] - emb[current]
    dist = np.linalg.norm(diffs, axis=1)
    if shortlist is not None and shortlist < cand.size:
        keep = np.sort(np.lexsort((cand, dist))[:shortlist])
        cand, diffs, dist = cand[keep], diffs[keep], dist[keep]
    gnorm = np.linalg.norm(grad)
    if gnorm < GRAD_FLOOR:
        return int(cand[np.lexsort((cand, dist))[0]])
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(dist > 0, diffs @ grad / (np.where(dist > 0, dist, 1.0) * gnorm), -np.inf)
    return int(cand[int(np.argmax(cos))])


def context_gradients(
    model: Seq2Seq,
    x: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray,
    obj: ObjectiveConfig | None = None,
    deltas: tuple | None = None,
    sites: tuple[PerturbationSite, PerturbationSite] | None = None,
) -> np.ndarray:
    """Gradient of L_o(x, Y) w.r.t. each source word embedding, shape (B, Lx, D).

    Parameter gradients are left as they were.
    """
    obj = obj or ObjectiveConfig()
    x, y = as_batch(x), as_batch(y)
    probe = Tensor(np.zeros((x.shape[0], x.shape[1], model.site_width(ENC0))), requires_grad=True, name="probe")
    dx, dy = deltas if deltas is not None else (None, None)
    kw = {} if sites is None else {"site_x": sites[0], "site_y": sites[1]}
    with preserved_param_grads(model):
        lo = loss_o(model, x, y, dx, dy, obj, probe=probe, **kw)
        restricted_loss_o(lo, y, mask, obj).backward()
    return ad.grad_at(probe).copy()


def plan_swaps(
    x: Sequence[int],
    y: Sequence[int],
    spans: Sequence[Span],
    token_grads: np.ndarray,
    embeddings: np.ndarray,
    cfg: AdvSwapConfig,
) -> SwapPlan:
    if cfg.strategy == "gradient":
        selected = rank_by_gradient(x, token_grads, cfg.k)
    else:
        selected = select_word_overlapping(x, span_tokens(y, spans))
    plan = SwapPlan(list(spans), selected, {}, cfg.strategy, cfg.k)
    for pos in selected:
        plan.replacements[pos] = swap_token(embeddings, int(x[pos]), token_grads[pos], cfg.shortlist)
    return plan


def apply_plan(x: Sequence[int], plan: SwapPlan) -> list[int]:
    out = [int(t) for t in x]
    for pos, tok in plan.replacements.items():
        out[pos] = tok
    return out


def build_advswap(
    model: Seq2Seq,
    x,
    y,
    cfg: AdvSwapConfig | None = None,
    rng: np.random.Generator | None = None,
    obj: ObjectiveConfig | None = None,
    token_grads: np.ndarray | None = None,
    spans: list[list[Span]] | None = None,
    deltas: tuple | None = None,
) -> tuple[np.ndarray, np.ndarray, list[SwapPlan]]:
    """Construct swapped sources x'' for a batch.

    Returns ``(x'', target_mask, plans)``. ``token_grads`` (B, Lx, D) and
    ``spans`` may come from a pass the caller already ran; otherwise they
    are computed here (one backward pass for the whole batch).
    """
    cfg = cfg or AdvSwapConfig()
    obj = obj or ObjectiveConfig()
    rng = rng or np.random.default_rng(0)
    x, y = as_batch(x), as_batch(y)
    if spans is None:
        spans = [
            pick_target_context(yy, xx, cfg.target_mode, cfg.num_spans, cfg.span_len, rng, cfg.span_retries)
            for xx, yy in zip(x, y)
        ]
    mask = np.stack([span_mask(s, y.shape[1]) for s in spans])
    emb = model.params["embed"].data
    if token_grads is None or cfg.sequential:
        token_grads = context_gradients(model, x, y, mask, obj, deltas)
    x2 = x.copy()
    plans = []
    for b in range(x.shape[0]):
        plan = plan_swaps(x[b], y[b], spans[b], token_grads[b], emb, cfg)
        if cfg.sequential and plan.selected_positions:
            # one swap at a time, each against the gradient at the current x''
            plan.replacements = {}
            cur = x[b].copy()
            for pos in plan.selected_positions:
                g = context_gradients(model, cur, y[b], mask[b : b + 1], obj)[0]
                plan.replacements[pos] = swap_token(emb, int(x[b, pos]), g[pos], cfg.shortlist)
                cur[pos] = plan.replacements[pos]
        x2[b] = apply_plan(x[b], plan)
        plans.append(plan)
    return x2, mask, plans
