"""Implicit adversarial perturbations by projected gradient ascent.

Each sequence's perturbation matrix is constrained to a Frobenius ball of
radius ``epsilon``; the ascent direction is the gradient normalized by its
own Frobenius norm, so the step length is exactly ``alpha`` before
projection.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import DEC0, ENC0, PerturbationSite, Seq2Seq, as_batch
from .objectives import ObjectiveConfig, loss_o

GRAD_FLOOR = 1e-12


@dataclass
class AdvGradConfig:
    alpha: float = 0.4
    epsilon: float = 0.2
    steps: int = 1
    noise_range: float = 1e-2
    site_x: PerturbationSite = ENC0
    site_y: PerturbationSite = DEC0
    use_x: bool = True
    use_y: bool = True

    def __post_init__(self):
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ValueError("alpha and epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.noise_range < 0:
            raise ValueError("noise_range must be >= 0")


@dataclass
class PerturbationPair:
    delta_x: np.ndarray
    delta_y: np.ndarray
    site_x: PerturbationSite
    site_y: PerturbationSite
    epsilon: float
    alpha: float
    steps: int
    ascent_steps_taken: dict = field(default_factory=lambda: {"x": 0, "y": 0})

    def as_inputs(self, cfg: AdvGradConfig) -> tuple[np.ndarray | None, np.ndarray | None]:
        return (self.delta_x if cfg.use_x else None, self.delta_y if cfg.use_y else None)


def frobenius_norm(delta) -> float:
    return float(np.sqrt(np.sum(np.square(delta))))


def _seq_norms(deltas: np.ndarray) -> np.ndarray:
    """Per-sequence Frobenius norms of a (B, L, W) stack, shaped (B, 1, 1)."""
    return np.sqrt(np.square(deltas).sum(axis=tuple(range(1, deltas.ndim)), keepdims=True))


def project_ball(delta, epsilon: float) -> np.ndarray:
    """Radially rescale ``delta`` so its Frobenius norm is at most ``epsilon``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    delta = np.asarray(delta, dtype=np.float64)
    norm = frobenius_norm(delta)
    if norm <= epsilon:
        return delta.copy()
    return delta * (epsilon / norm)


def ascent_step(delta, grad, alpha: float, epsilon: float) -> np.ndarray:
    """One normalized gradient-ascent step followed by ball projection."""
    delta = np.asarray(delta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != delta.shape:
        raise ValueError(f"gradient shape {grad.shape} != perturbation shape {delta.shape}")
    gnorm = frobenius_norm(grad)
    if gnorm < GRAD_FLOOR:
        return project_ball(delta, epsilon)
    return project_ball(delta + alpha * grad / gnorm, epsilon)


def project_ball_batch(deltas: np.ndarray, epsilon: float) -> np.ndarray:
    """:func:`project_ball` applied to every sequence of a (B, ...) stack."""
    norms = _seq_norms(deltas)
    factor = np.where(norms > epsilon, epsilon / np.where(norms > 0, norms, 1.0), 1.0)
    return deltas * factor


def ascent_step_batch(deltas: np.ndarray, grads: np.ndarray, alpha: float, epsilon: float) -> np.ndarray:
    """:func:`ascent_step` applied to every sequence of a (B, ...) stack."""
    if grads.shape != deltas.shape:
        raise ValueError(f"gradient shape {grads.shape} != perturbation shape {deltas.shape}")
    gnorms = _seq_norms(grads)
    live = gnorms >= GRAD_FLOOR
    step = np.where(live, alpha * grads / np.where(live, gnorms, 1.0), 0.0)
    return project_ball_batch(deltas + step, epsilon)


def sample_noise(rng: np.random.Generator, shape, noise_range: float) -> np.ndarray:
    if noise_range == 0:
        return np.zeros(shape)
    return rng.uniform(-noise_range, noise_range, size=shape)


def init_deltas(model: Seq2Seq, x: np.ndarray, y: np.ndarray, cfg: AdvGradConfig, rng: np.random.Generator):
    """Uniform starting perturbations, zeros for a disabled side."""
    b = x.shape[0]
    shape_x = (b, x.shape[1], model.site_width(cfg.site_x))
    shape_y = (b, y.shape[1], model.site_width(cfg.site_y))
    # both draws always happen so disabling a side does not shift the RNG stream
    dx = sample_noise(rng, shape_x, cfg.noise_range)
    dy = sample_noise(rng, shape_y, cfg.noise_range)
    return (dx if cfg.use_x else np.zeros(shape_x)), (dy if cfg.use_y else np.zeros(shape_y))


@contextlib.contextmanager
def preserved_param_grads(model: Seq2Seq):
    """Restore parameter ``.grad`` values after an auxiliary backward pass."""
    saved = {k: (None if t.grad is None else t.grad.copy()) for k, t in model.params.items()}
    try:
        yield
    finally:
        for k, t in model.params.items():
            t.grad = saved[k]


def delta_grads(model, x, y, dx, dy, cfg: AdvGradConfig, obj: ObjectiveConfig) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of L_o w.r.t. both perturbations, leaving parameter grads untouched."""
    tx = Tensor(dx, requires_grad=cfg.use_x, name="delta_x")
    ty = Tensor(dy, requires_grad=cfg.use_y, name="delta_y")
    with preserved_param_grads(model):
        lo = loss_o(model, x, y, tx if cfg.use_x else None, ty if cfg.use_y else None, obj, cfg.site_x, cfg.site_y)
        lo.total.backward()
    gx = ad.grad_at(tx) if cfg.use_x else np.zeros_like(dx)
    gy = ad.grad_at(ty) if cfg.use_y else np.zeros_like(dy)
    return gx, gy


def build_advgrad(
    model: Seq2Seq,
    x,
    y,
    cfg: AdvGradConfig | None = None,
    obj: ObjectiveConfig | None = None,
    rng: np.random.Generator | None = None,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    first_grads: tuple[np.ndarray, np.ndarray] | None = None,
) -> PerturbationPair:
    """Projected gradient ascent on (delta_x, delta_y) against L_o.

    ``init`` supplies the starting noise (drawn from ``rng`` otherwise).
    ``first_grads`` lets a caller reuse gradients from a backward pass of
    L_o it already ran at ``init``; later steps re-evaluate L_o.
    """
    cfg = cfg or AdvGradConfig()
    obj = obj or ObjectiveConfig()
    x, y = as_batch(x), as_batch(y)
    if init is None:
        init = init_deltas(model, x, y, cfg, rng or np.random.default_rng(0))
    dx, dy = (np.array(d, dtype=np.float64) for d in init)
    pair = PerturbationPair(dx, dy, cfg.site_x, cfg.site_y, cfg.epsilon, cfg.alpha, cfg.steps)
    for step in range(cfg.steps):
        if step == 0 and first_grads is not None:
            gx, gy = first_grads
        else:
            gx, gy = delta_grads(model, x, y, dx, dy, cfg, obj)
        if cfg.use_x:
            dx = ascent_step_batch(dx, np.asarray(gx), cfg.alpha, cfg.epsilon)
            pair.ascent_steps_taken["x"] += 1
        if cfg.use_y:
            dy = ascent_step_batch(dy, np.asarray(gy), cfg.alpha, cfg.epsilon)
            pair.ascent_steps_taken["y"] += 1
    pair.delta_x, pair.delta_y = dx, dy
    return pair
