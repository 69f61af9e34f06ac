"""AdvSeq training loop.

One step:

1. draw uniform noise (dx, dy) and, for AdvSwap, the target contexts;
2. forward L_o, back-propagate half of it (parameter grads g0 = 1/2 dL_o),
   reading the gradients at the perturbations and at the source embeddings;
3. one (or more) projected ascent steps give (dx', dy'); the source
   gradients give the swapped sample x'';
4. forward L_i + L_e, back-propagate half of it onto the same parameter
   grads (g1 = g0 + 1/2 d(L_i + L_e));
5. one Adam update from g1.

Disabled components contribute nothing; with KL and both augmentations off
no noise is drawn and the step is plain (label-smoothed) NLL training.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .advgrad import AdvGradConfig, build_advgrad, frobenius_norm, init_deltas, preserved_param_grads
from .advswap import AdvSwapConfig, build_advswap, pick_target_context, span_mask
from .autodiff import Tensor
from .metrics import bleu
from .model import ENC0, ModelConfig, PerturbationSite, Seq2Seq, load_checkpoint, save_checkpoint, with_eos
from .objectives import ObjectiveConfig, loss_e, loss_i, loss_o, restricted_loss_o

LOG_FIELDS = ("step", "nll", "kl_o", "L_i", "L_e", "grad_norm", "delta_x_norm", "delta_y_norm", "swaps")


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # optimisation
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    label_smoothing: float = 0.1
    # AdvGrad
    alpha: float = 0.4
    epsilon: float = 0.2
    ascent_steps: int = 1
    noise_range: float = 1e-2
    site_x: str = "enc0"
    site_y: str = "dec0"
    # AdvSwap
    k: float = 0.15
    target_mode: str = "whole"
    strategy: str = "gradient"
    num_spans: int = 2
    span_len: int = 3
    swap_shortlist: int = 0
    sequential_swaps: bool = False
    # component switches
    advgrad: bool = True
    advswap: bool = True
    kl: bool = True
    delta_x: bool = True
    delta_y: bool = True
    kl_average: bool = True
    stop_grad_clean: bool = False
    # model
    arch: str = "attention"
    embed_dim: int = 32
    hidden_dim: int = 64
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    max_decode_len: int = 32
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        # delegate the remaining checks to the component configs
        self.objective()
        self.advgrad_config()
        self.advswap_config()

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.label_smoothing, self.kl, self.kl_average, self.stop_grad_clean)

    def advgrad_config(self) -> AdvGradConfig:
        return AdvGradConfig(
            self.alpha,
            self.epsilon,
            self.ascent_steps,
            self.noise_range,
            PerturbationSite.parse(self.site_x),
            PerturbationSite.parse(self.site_y),
            self.delta_x,
            self.delta_y,
        )

    def advswap_config(self) -> AdvSwapConfig:
        return AdvSwapConfig(
            self.strategy,
            self.target_mode,
            self.k,
            self.num_spans,
            self.span_len,
            shortlist=self.swap_shortlist or None,
            sequential=self.sequential_swaps,
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size,
            self.embed_dim,
            self.hidden_dim,
            self.num_encoder_layers,
            self.num_decoder_layers,
            self.arch,
            self.max_decode_len,
        )

    @property
    def uses_noise(self) -> bool:
        return self.kl or self.advgrad

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class StepReport:
    step: int
    nll: float
    kl_o: float
    l_i: float
    l_e: float
    grad_norm: float
    delta_x_norm: float
    delta_y_norm: float
    swaps: int
    forward_passes: int = 0
    backward_passes: int = 0
    aborted: str = ""

    def log_line(self) -> str:
        vals = (self.step, self.nll, self.kl_o, self.l_i, self.l_e, self.grad_norm,
                self.delta_x_norm, self.delta_y_norm, self.swaps)
        return "\t".join(repr(v) if isinstance(v, float) else str(v) for v in vals)


class Adam:
    """Adam with beta1=0.9, beta2=0.999, eps=1e-8 and bias correction."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient for {name}: shape {g.shape} != {p.data.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")}


def optimizer_update(model: Seq2Seq, grads: dict[str, np.ndarray], state: Adam, lr: float | None = None) -> None:
    if lr is not None:
        state.lr = lr
    state.update(model.params, grads)


def _finite(t: Tensor) -> bool:
    return bool(np.isfinite(t.data).all())


def advseq_step(
    model: Seq2Seq,
    batch: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    opt: Adam | None,
    rng: np.random.Generator,
    step: int = 0,
) -> StepReport:
    """One AdvSeq update on a batch of equal-length (x, y-with-EOS) pairs.

    With ``opt=None`` the accumulated gradient is left in the parameters'
    ``.grad`` and no update is applied.
    """
    x, y = (np.asarray(a, dtype=np.int64) for a in batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    obj = cfg.objective()
    agc = cfg.advgrad_config()
    swc = cfg.advswap_config()
    f0 = model.forward_passes
    backwards = 0
    model.zero_grad()

    dx0 = dy0 = None
    if cfg.uses_noise:
        dx0, dy0 = init_deltas(model, x, y, agc, rng)
    spans = None
    if cfg.advswap:
        spans = [
            pick_target_context(yy, xx, swc.target_mode, swc.num_spans, swc.span_len, rng, swc.span_retries)
            for xx, yy in zip(x, y)
        ]
    tx = Tensor(dx0, requires_grad=True, name="delta_x") if dx0 is not None and cfg.delta_x else None
    ty = Tensor(dy0, requires_grad=True, name="delta_y") if dy0 is not None and cfg.delta_y else None
    probe = None
    if cfg.advswap:
        probe = Tensor(np.zeros((x.shape[0], x.shape[1], model.site_width(ENC0))), requires_grad=True, name="probe")

    lo = loss_o(model, x, y, tx, ty, obj, agc.site_x, agc.site_y, probe)
    report = StepReport(step, lo.nll.item(), lo.kl.item(), 0.0, 0.0, 0.0, 0.0, 0.0, 0)
    if not _finite(lo.total):
        model.zero_grad()
        report.aborted = "non-finite L_o"
        report.forward_passes = model.forward_passes - f0
        return report

    token_grads = None
    if cfg.advswap and swc.target_mode == "spans":
        mask = np.stack([span_mask(s, y.shape[1]) for s in spans])
        with preserved_param_grads(model):
            ad.scale(restricted_loss_o(lo, y, mask, obj), 0.5).backward()
            backwards += 1
        token_grads = ad.grad_at(probe).copy()
        for t in (probe, tx, ty):
            if t is not None:
                t.zero_grad()

    ad.scale(lo.total, 0.5).backward()
    backwards += 1
    if cfg.advswap and token_grads is None:
        token_grads = ad.grad_at(probe).copy()

    l_i = l_e = None
    if cfg.advgrad:
        gx = ad.grad_at(tx) if tx is not None else np.zeros_like(dx0)
        gy = ad.grad_at(ty) if ty is not None else np.zeros_like(dy0)
        pair = build_advgrad(model, x, y, agc, obj, init=(dx0, dy0), first_grads=(gx, gy))
        dxp, dyp = pair.as_inputs(agc)
        report.delta_x_norm = _mean_norm(pair.delta_x)
        report.delta_y_norm = _mean_norm(pair.delta_y)
        l_i = loss_i(model, x, y, dxp, dyp, obj, agc.site_x, agc.site_y, clean_logp=lo.clean_logp)
        report.l_i = l_i.item()
    if cfg.advswap:
        x2, mask, plans = build_advswap(model, x, y, swc, rng, obj, token_grads=token_grads, spans=spans)
        report.swaps = int(sum(len(p.replacements) for p in plans))
        l_e = loss_e(model, x2, x, y, mask, obj, clean_logp=lo.clean_logp)
        report.l_e = l_e.item()

    aug = None
    if l_i is not None and l_e is not None:
        aug = l_i + l_e
    else:
        aug = l_i if l_i is not None else l_e
    if aug is not None:
        if not _finite(aug):
            model.zero_grad()
            report.aborted = "non-finite L_i + L_e"
            report.forward_passes = model.forward_passes - f0
            return report
        ad.scale(aug, 0.5).backward()
        backwards += 1

    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in model.params.items()}
    report.grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    report.forward_passes = model.forward_passes - f0
    report.backward_passes = backwards
    if not math.isfinite(report.grad_norm):
        model.zero_grad()
        report.aborted = "non-finite gradient"
        return report
    if opt is not None:
        opt.update(model.params, grads)
    return report


def _mean_norm(deltas: np.ndarray) -> float:
    return float(np.mean([frobenius_norm(d) for d in deltas]))


# -- data plumbing -----------------------------------------------------
Pair = tuple[list[int], list[int]]


def make_batches(pairs: Sequence[Pair], batch_size: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle into batches of equal (source, target) length; targets get EOS."""
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (x, y) in enumerate(pairs):
        buckets.setdefault((len(x), len(y) + 1), []).append(i)
    batches = []
    for key in sorted(buckets):
        idx = buckets[key]
        order = [idx[j] for j in rng.permutation(len(idx))]
        for s in range(0, len(order), batch_size):
            chunk = order[s : s + batch_size]
            batches.append(
                (
                    np.array([pairs[i][0] for i in chunk], dtype=np.int64),
                    np.array([with_eos(pairs[i][1]) for i in chunk], dtype=np.int64),
                )
            )
    return [batches[j] for j in rng.permutation(len(batches))]


def group_by_source_length(xs: Sequence[Sequence[int]]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, x in enumerate(xs):
        groups.setdefault(len(x), []).append(i)
    return groups


def decode_all(model: Seq2Seq, xs: Sequence[Sequence[int]], chunk: int = 256) -> list[list[int]]:
    out: list[list[int] | None] = [None] * len(xs)
    for _, idx in sorted(group_by_source_length(xs).items()):
        for s in range(0, len(idx), chunk):
            part = idx[s : s + chunk]
            for i, dec in zip(part, model.greedy_decode_batch(np.array([xs[i] for i in part]))):
                out[i] = dec
    return out  # type: ignore[return-value]


def evaluate(model: Seq2Seq, pairs: Sequence[Pair]) -> dict[str, float]:
    """Greedy-decoding sequence accuracy and mean sentence BLEU."""
    if not pairs:
        return {"seq_acc": 0.0, "bleu": 0.0, "n": 0}
    hyps = decode_all(model, [x for x, _ in pairs])
    acc = float(np.mean([h == list(y) for h, (_, y) in zip(hyps, pairs)]))
    b = float(np.mean([bleu(h, y) for h, (_, y) in zip(hyps, pairs)]))
    return {"seq_acc": acc, "bleu": b, "n": len(pairs)}


# -- training ----------------------------------------------------------
@dataclass
class TrainState:
    model: Seq2Seq
    opt: Adam
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    log: list[StepReport] = field(default_factory=list)


def init_state(cfg: TrainConfig, vocab_size: int) -> TrainState:
    model = Seq2Seq(cfg.model_config(vocab_size), seed=cfg.seed)
    # training randomness uses a stream distinct from parameter initialisation
    return TrainState(model, Adam(cfg.learning_rate), np.random.default_rng([cfg.seed, 1]))


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    meta = {
        "version": __version__,
        "train_config": asdict(cfg),
        "epoch": state.epoch,
        "step": state.step,
        "adam_t": state.opt.t,
        "rng": state.rng.bit_generator.state,
    }
    save_checkpoint(path, state.model, meta, state.opt.state_arrays())


def load_state(path) -> tuple[TrainState, TrainConfig]:
    model, meta, extra = load_checkpoint(path)
    cfg = TrainConfig(**meta.get("train_config", {}))
    opt = Adam(cfg.learning_rate)
    opt.load_state(int(meta.get("adam_t", 0)), extra)
    rng = np.random.default_rng()
    if "rng" in meta:
        rng.bit_generator.state = meta["rng"]
    return TrainState(model, opt, rng, int(meta.get("epoch", 0)), int(meta.get("step", 0))), cfg


def log_header(cfg: TrainConfig) -> list[str]:
    return [f"# advseq {__version__}", "# config " + " ".join(f"{k}={v}" for k, v in asdict(cfg).items()),
            "# " + "\t".join(LOG_FIELDS)]


def train(
    pairs: Sequence[Pair],
    cfg: TrainConfig,
    vocab_size: int,
    state: TrainState | None = None,
    log_path=None,
    checkpoint_dir=None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run ``cfg.epochs`` epochs (total, counting any epochs already in ``state``)."""
    for x, y in pairs:
        if not x or not y:
            raise ValueError("empty source or target in training data")
        if max(x + y) >= vocab_size or min(x + y) < 0:
            raise ValueError("token id outside the vocabulary")
    state = state or init_state(cfg, vocab_size)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    log_fh = None
    if log_path is not None:
        mode = "a" if state.step > 0 and Path(log_path).exists() else "w"
        log_fh = open(log_path, mode, encoding="utf-8")
        if mode == "w":
            log_fh.write("\n".join(log_header(cfg)) + "\n")
    try:
        while state.epoch < cfg.epochs:
            for batch in make_batches(pairs, cfg.batch_size, state.rng):
                state.step += 1
                rep = advseq_step(state.model, batch, cfg, state.opt, state.rng, state.step)
                state.log.append(rep)
                if log_fh is not None:
                    log_fh.write(rep.log_line() + "\n")
            state.epoch += 1
            if checkpoint_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_state(Path(checkpoint_dir) / f"epoch{state.epoch:03d}.ckpt", state, cfg)
            if on_epoch is not None:
                on_epoch(state)
    finally:
        if log_fh is not None:
            log_fh.close()
    if checkpoint_dir is not None:
        save_state(Path(checkpoint_dir) / "final.ckpt", state, cfg)
    return state
