"""Losses: label-smoothed NLL, symmetric KL, and the three training objectives.

Batch conventions: sources ``x`` are (B, Lx) id arrays, targets ``y`` are
(B, T) id arrays already carrying EOS. Per-sample losses are averaged over
the batch. NLL is averaged over target positions; KL terms are summed over
positions and, when ``kl_average`` is on (default), divided by the number of
positions they were summed over.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import DEC0, ENC0, PerturbationSite, Seq2Seq, as_batch

PROB_FLOOR = 1e-12


@dataclass
class ObjectiveConfig:
    smoothing: float = 0.1
    use_kl: bool = True
    kl_average: bool = True
    stop_grad_clean: bool = False

    def __post_init__(self):
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"label smoothing must lie in [0, 1), got {self.smoothing}")


@dataclass
class ProbSeq:
    """T x V next-token distributions plus a target-span mask of length T."""

    dists: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.dists = np.asarray(self.dists, dtype=np.float64)
        if self.dists.ndim != 2:
            raise ValueError(f"ProbSeq expects a T x V matrix, got shape {self.dists.shape}")
        if self.mask is None:
            self.mask = np.ones(self.dists.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.dists.shape[0],):
            raise ValueError("mask length must equal the number of rows")
        if (self.dists < 0).any() or not np.allclose(self.dists.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("rows must be probability distributions")


@dataclass
class LossBreakdown:
    nll: Tensor
    kl: Tensor
    total: Tensor
    clean_logp: Tensor | None = field(default=None, repr=False)
    pert_logp: Tensor | None = field(default=None, repr=False)

    def values(self) -> dict[str, float]:
        return {"nll": self.nll.item(), "kl": self.kl.item(), "total": self.total.item()}


@dataclass
class NllResult:
    value: float
    clamped: int  # number of smoothed-target entries that hit the probability floor


# -- distribution-level (numpy) ----------------------------------------
def kl_sym(p, q) -> np.ndarray | float:
    """KL(p||q) + KL(q||p) along the last axis."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"kl_sym: shape mismatch {p.shape} vs {q.shape}")
    lp = np.log(np.maximum(p, PROB_FLOOR))
    lq = np.log(np.maximum(q, PROB_FLOOR))
    out = ((p - q) * (lp - lq)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def nll_smoothed(dist, y, smoothing: float) -> NllResult:
    """Label-smoothed NLL averaged over positions, on explicit probabilities.

    Per position: ``-(1 - s) log p[y_t] - (s / V) sum_v log p[v]``.
    """
    probs = dist.dists if isinstance(dist, ProbSeq) else np.asarray(dist, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if probs.shape[0] != y.shape[0]:
        raise ValueError(f"nll_smoothed: {probs.shape[0]} rows for {y.shape[0]} targets")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    t, v = probs.shape
    gold = probs[np.arange(t), y]
    clamped = int((probs < PROB_FLOOR).sum()) if smoothing > 0 else int((gold < PROB_FLOOR).sum())
    logp = np.log(np.maximum(probs, PROB_FLOOR))
    per = -(1.0 - smoothing) * logp[np.arange(t), y] - (smoothing / v) * logp.sum(axis=1)
    return NllResult(float(per.mean()), clamped)


# -- graph-level -------------------------------------------------------
def kl_sym_rows(logp: Tensor, logq: Tensor) -> Tensor:
    """Row-wise symmetric KL from log-probabilities: sum_v (p - q)(log p - log q)."""
    if logp.shape != logq.shape:
        raise ad.ShapeError(f"kl_sym_rows: shape mismatch {logp.shape} vs {logq.shape}")
    return ad.sum_((ad.exp(logp) - ad.exp(logq)) * (logp - logq), axis=-1)


def nll_rows(logp: Tensor, y: np.ndarray, smoothing: float) -> Tensor:
    """(B, T) per-position smoothed NLL from (B, T, V) log-probabilities."""
    b, t, v = logp.shape
    gold = ad.getitem(logp, (np.arange(b)[:, None], np.arange(t)[None, :], y))
    per = ad.scale(gold, -(1.0 - smoothing))
    if smoothing > 0:
        per = per + ad.scale(ad.sum_(logp, axis=-1), -smoothing / v)
    return per


def _masked_mean(rows: Tensor, mask: np.ndarray | None, average: bool) -> Tensor:
    """Per-sample sum (or mean) over masked positions, then batch mean."""
    b, t = rows.shape
    if mask is None:
        per_sample = ad.sum_(rows, axis=1)
        counts = np.full(b, float(t))
    else:
        mask = np.asarray(mask, dtype=np.float64).reshape(b, t)
        per_sample = ad.sum_(rows * mask, axis=1)
        counts = mask.sum(axis=1)
    if average:
        per_sample = per_sample * (1.0 / np.maximum(counts, 1.0))
    return ad.mean(per_sample)


def _clean_side(logp: Tensor, cfg: ObjectiveConfig) -> Tensor:
    return ad.stop_gradient(logp) if cfg.stop_grad_clean else logp


def _pert_map(sites, deltas, probe):
    pert: dict[PerturbationSite, Tensor] = {}
    if probe is not None:
        pert[ENC0] = probe
    for site, delta in zip(sites, deltas):
        if delta is None:
            continue
        delta = delta if isinstance(delta, Tensor) else Tensor(delta)
        pert[site] = pert[site] + delta if site in pert else delta
    return pert


def loss_o(
    model: Seq2Seq,
    x,
    y,
    delta_x,
    delta_y,
    cfg: ObjectiveConfig | None = None,
    site_x: PerturbationSite = ENC0,
    site_y: PerturbationSite = DEC0,
    probe: Tensor | None = None,
) -> LossBreakdown:
    """Base objective: clean NLL plus KL_S between perturbed and clean predictions.

    With ``cfg.use_kl`` off the objective is the NLL of the perturbed pass
    (the KL-free adversarial-training variant). ``probe`` is an optional
    zero tensor added at the source word embeddings of *both* passes, so its
    gradient is the full gradient of the loss w.r.t. those embeddings.
    """
    cfg = cfg or ObjectiveConfig()
    x, y = as_batch(x), as_batch(y)
    unperturbed = delta_x is None and delta_y is None
    if not cfg.use_kl and not unperturbed:
        pert = model.forward(x, y, _pert_map((site_x, site_y), (delta_x, delta_y), probe)).logp
        pnll = _masked_mean(nll_rows(pert, y, cfg.smoothing), None, True)
        return LossBreakdown(pnll, Tensor(0.0), pnll, None, pert)
    clean = model.forward(x, y, {ENC0: probe} if probe is not None else None).logp
    nll = _masked_mean(nll_rows(clean, y, cfg.smoothing), None, True)
    if unperturbed:
        zero = Tensor(0.0)
        return LossBreakdown(nll, zero, nll + zero if cfg.use_kl else nll, clean, clean)
    pert = model.forward(x, y, _pert_map((site_x, site_y), (delta_x, delta_y), probe)).logp
    kl = _masked_mean(kl_sym_rows(pert, _clean_side(clean, cfg)), None, cfg.kl_average)
    return LossBreakdown(nll, kl, nll + kl, clean, pert)


def restricted_loss_o(lo: LossBreakdown, y, mask, cfg: ObjectiveConfig) -> Tensor:
    """L_o(x, Y): the same two passes, with both terms restricted to masked target positions."""
    y = as_batch(y)
    if not cfg.use_kl:
        return _masked_mean(nll_rows(lo.pert_logp, y, cfg.smoothing), mask, True)
    nll = _masked_mean(nll_rows(lo.clean_logp, y, cfg.smoothing), mask, True)
    if lo.pert_logp is lo.clean_logp:
        return nll
    return nll + _masked_mean(kl_sym_rows(lo.pert_logp, _clean_side(lo.clean_logp, cfg)), mask, cfg.kl_average)


def loss_i(
    model: Seq2Seq,
    x,
    y,
    delta_x,
    delta_y,
    cfg: ObjectiveConfig | None = None,
    site_x: PerturbationSite = ENC0,
    site_y: PerturbationSite = DEC0,
    clean_logp: Tensor | None = None,
) -> Tensor:
    """Implicit-adversarial loss: KL_S between predictions under (x+dx', y+dy') and clean."""
    cfg = cfg or ObjectiveConfig()
    x, y = as_batch(x), as_batch(y)
    pert = model.forward(x, y, _pert_map((site_x, site_y), (delta_x, delta_y), None)).logp
    if not cfg.use_kl:
        return _masked_mean(nll_rows(pert, y, cfg.smoothing), None, True)
    if clean_logp is None:
        clean_logp = model.forward(x, y).logp
    return _masked_mean(kl_sym_rows(pert, _clean_side(clean_logp, cfg)), None, cfg.kl_average)


def loss_e(
    model: Seq2Seq,
    x_swapped,
    x,
    y,
    target_mask,
    cfg: ObjectiveConfig | None = None,
    clean_logp: Tensor | None = None,
) -> Tensor:
    """Explicit-adversarial loss: KL_S between predictions for x'' and x over masked positions."""
    cfg = cfg or ObjectiveConfig()
    x2, x, y = as_batch(x_swapped), as_batch(x), as_batch(y)
    if x2.shape != x.shape:
        raise ValueError(f"swapped source changed shape {x.shape} -> {x2.shape}")
    mask = np.asarray(target_mask, dtype=bool).reshape(y.shape)
    adv = model.forward(x2, y).logp
    if not cfg.use_kl:
        return _masked_mean(nll_rows(adv, y, cfg.smoothing), mask, True)
    if clean_logp is None:
        clean_logp = model.forward(x, y).logp
    return _masked_mean(kl_sym_rows(adv, _clean_side(clean_logp, cfg)), mask, cfg.kl_average)
