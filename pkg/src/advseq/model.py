"""Toy encoder-decoder with perturbation injection points.

Two architectures share one parameter container:

* ``attention`` (default): learned token + position embeddings, post-LN
  single-head transformer blocks (self-attention, cross-attention in the
  decoder, ReLU feed-forward).
* ``gru``: stacked GRU encoder/decoder with dot-product attention over the
  top encoder layer before the output projection.

A :class:`PerturbationSite` names an activation: layer 0 is the word
embedding lookup output (before positions are added), layer ``l`` the
output of block ``l``. Perturbations are added to the activation before it
feeds the next layer.

Sequences passed to :meth:`Seq2Seq.forward` are teacher-forced on ``y``
exactly as given; callers that want end-of-sequence supervision append
``EOS`` themselves (see :func:`with_eos`).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
NUM_SPECIAL = len(SPECIAL_TOKENS)

CHECKPOINT_MAGIC = b"ADVSEQ-CKPT 1\n"


class Vocab:
    """Token <-> id bijection with the four specials fixed at ids 0-3."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        if len(set(tokens)) != len(tokens):
            dup = sorted({t for t in tokens if tokens.count(t) > 1})
            raise ValueError(f"duplicate vocabulary tokens: {dup}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and other.tokens == self.tokens

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, words: Sequence[str], strict: bool = True) -> list[int]:
        if strict:
            missing = [w for w in words if w not in self.index]
            if missing:
                raise KeyError(f"unknown tokens: {missing}")
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def content_ids(self) -> range:
        return range(NUM_SPECIAL, len(self.tokens))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        tokens = [ln for ln in lines if ln]
        if tuple(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: vocabulary must start with {SPECIAL_TOKENS}")
        return cls(tokens)


def is_special(token_id: int) -> bool:
    return 0 <= token_id < NUM_SPECIAL


def with_eos(y: Sequence[int]) -> list[int]:
    return list(y) + [EOS]


@dataclass(frozen=True)
class PerturbationSite:
    side: str  # "encoder" | "decoder"
    layer_id: int = 0

    def __post_init__(self):
        if self.side not in ("encoder", "decoder"):
            raise ValueError(f"side must be 'encoder' or 'decoder', got {self.side!r}")
        if self.layer_id < 0:
            raise ValueError("layer_id must be >= 0")

    def __str__(self) -> str:
        return f"{self.side[:3]}{self.layer_id}"

    @classmethod
    def parse(cls, text: str) -> "PerturbationSite":
        """Parse ``enc2`` / ``dec0`` / ``encoder:2`` forms."""
        text = text.strip()
        if ":" in text:
            side, layer = text.split(":", 1)
        else:
            side, layer = text[:3], text[3:]
        side = {"enc": "encoder", "dec": "decoder"}.get(side, side)
        return cls(side, int(layer))


ENC0 = PerturbationSite("encoder", 0)
DEC0 = PerturbationSite("decoder", 0)


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    arch: str = "attention"
    max_decode_len: int = 32
    max_positions: int = 64
    output_init: str = "random"  # "random" | "zero"

    def __post_init__(self):
        dims = (self.vocab_size, self.embed_dim, self.hidden_dim, self.max_positions)
        if min(dims) <= 0 or self.num_encoder_layers < 0 or self.num_decoder_layers < 0:
            raise ValueError(f"model dimensions must be positive: {self}")
        if self.max_decode_len < 1:
            raise ValueError("max_decode_len must be >= 1")
        if self.arch not in ("attention", "gru"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.output_init not in ("random", "zero"):
            raise ValueError(f"unknown output_init {self.output_init!r}")


class Forward(NamedTuple):
    logp: Tensor  # (B, T, V) log-probabilities
    activations: dict  # PerturbationSite -> Tensor (pre-perturbation activation)


def as_batch(seq) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a token sequence or a (batch, length) array, got shape {arr.shape}")
    return arr


class Seq2Seq:
    """Parameter set plus the forward computations over it."""

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.forward_passes = 0
        init = _init_params(config, np.random.default_rng(seed))
        if params is not None:
            if list(params) != list(init):
                raise ValueError("parameter names/order do not match the configuration")
            for k, v in params.items():
                if np.shape(v) != init[k].shape:
                    raise ValueError(f"parameter {k}: shape {np.shape(v)} != {init[k].shape}")
            init = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        for k, v in init.items():
            self.params[k] = Tensor(v.copy(), requires_grad=True, name=k)
        self._causal: dict[int, np.ndarray] = {}

    # -- parameter helpers -------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        ad.zero_grads(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=np.float64)

    def snapshot(self) -> "Seq2Seq":
        """Independent copy for read-only evaluation."""
        return Seq2Seq(self.config, self.state_dict())

    def num_layers(self, side: str) -> int:
        return self.config.num_encoder_layers if side == "encoder" else self.config.num_decoder_layers

    def site_width(self, site: PerturbationSite) -> int:
        self.check_site(site)
        if self.config.arch == "attention" or site.layer_id == 0:
            return self.config.embed_dim
        return self.config.hidden_dim

    def check_site(self, site: PerturbationSite) -> None:
        if site.layer_id > self.num_layers(site.side):
            raise ValueError(f"site {site}: layer id exceeds {self.num_layers(site.side)} {site.side} layers")

    def embedding_vectors(self) -> np.ndarray:
        """Read-only snapshot of the |V| x embed_dim token embedding matrix."""
        out = self.params["embed"].data.copy()
        out.flags.writeable = False
        return out

    # -- forward -----------------------------------------------------
    def forward(
        self,
        x,
        y,
        perturb: Mapping[PerturbationSite, object] | None = None,
        retain: Iterable[PerturbationSite] = (),
    ) -> Forward:
        """Teacher-forced log-probabilities for targets ``y`` given sources ``x``.

        ``x`` and ``y`` are single sequences or equal-length batches. The
        decoder input is ``BOS`` followed by ``y[:-1]``.
        """
        x, y = as_batch(x), as_batch(y)
        if x.shape[1] == 0 or y.shape[1] == 0:
            raise ValueError("empty source or target sequence")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"batch size mismatch: {x.shape[0]} sources vs {y.shape[0]} targets")
        self._check_ids(x)
        self._check_ids(y)
        perturb = dict(perturb or {})
        for site in perturb:
            self.check_site(site)
        y_in = np.concatenate([np.full((y.shape[0], 1), BOS, dtype=np.int64), y[:, :-1]], axis=1)
        ctx = _SiteContext(self, perturb, set(retain), x.shape[0], {"encoder": x.shape[1], "decoder": y.shape[1]})
        if self.config.arch == "attention":
            memory = self._encode_attention(x, ctx)
            h = self._decode_attention(memory, y_in, ctx)
        else:
            memory, final = self._encode_gru(x, ctx)
            h = self._decode_gru(memory, final, y_in, ctx)
        logits = h @ self.params["out_w"] + self.params["out_b"]
        self.forward_passes += 1
        return Forward(ad.log_softmax(logits, axis=-1), ctx.activations)

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"token ids outside [0, {self.config.vocab_size})")

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None) -> Tensor:
        p = self.params
        q = q_in @ p[prefix + "wq"]
        k = kv_in @ p[prefix + "wk"]
        v = kv_in @ p[prefix + "wv"]
        scores = ad.scale(q @ k.swapaxes(-1, -2), 1.0 / np.sqrt(q.shape[-1]))
        if mask is not None:
            scores = scores + mask
        return (ad.softmax(scores, axis=-1) @ v) @ p[prefix + "wo"]

    def _ffn(self, prefix: str, h: Tensor) -> Tensor:
        p = self.params
        return ad.relu(h @ p[prefix + "w1"] + p[prefix + "b1"]) @ p[prefix + "w2"] + p[prefix + "b2"]

    def _ln(self, name: str, h: Tensor) -> Tensor:
        return ad.layer_norm(h, self.params[name + "_g"], self.params[name + "_b"])

    def _positions(self, length: int) -> Tensor:
        if length > self.config.max_positions:
            raise ValueError(f"sequence length {length} exceeds max_positions {self.config.max_positions}")
        return self.params["pos"][:length]

    def _encode_attention(self, x: np.ndarray, ctx: "_SiteContext") -> Tensor:
        h = ctx.site("encoder", 0, ad.embedding(self.params["embed"], x))
        h = h + self._positions(x.shape[1])
        for l in range(1, self.config.num_encoder_layers + 1):
            pre = f"enc{l}_"
            h = self._ln(pre + "ln1", h + self._attention(pre + "att_", h, h, None))
            h = self._ln(pre + "ln2", h + self._ffn(pre + "ff_", h))
            h = ctx.site("encoder", l, h)
        return h

    def _decode_attention(self, memory: Tensor, y_in: np.ndarray, ctx: "_SiteContext") -> Tensor:
        t = y_in.shape[1]
        mask = self._causal.get(t)
        if mask is None:
            mask = np.triu(np.full((t, t), -1e9), k=1)
            self._causal[t] = mask
        h = ctx.site("decoder", 0, ad.embedding(self.params["embed"], y_in))
        h = h + self._positions(t)
        for l in range(1, self.config.num_decoder_layers + 1):
            pre = f"dec{l}_"
            h = self._ln(pre + "ln1", h + self._attention(pre + "self_", h, h, mask))
            h = self._ln(pre + "ln2", h + self._attention(pre + "cross_", h, memory, None))
            h = self._ln(pre + "ln3", h + self._ffn(pre + "ff_", h))
            h = ctx.site("decoder", l, h)
        return h

    def _gru(self, prefix: str, inp: Tensor, h0: Tensor | None) -> tuple[Tensor, Tensor]:
        p = self.params
        hd = self.config.hidden_dim
        b, t = inp.shape[0], inp.shape[1]
        xp = inp @ p[prefix + "wx"] + p[prefix + "bx"]
        h = h0 if h0 is not None else Tensor(np.zeros((b, hd)))
        outs = []
        for i in range(t):
            xi = xp[:, i, :]
            hp = h @ p[prefix + "wh"] + p[prefix + "bh"]
            r = ad.sigmoid(xi[:, :hd] + hp[:, :hd])
            z = ad.sigmoid(xi[:, hd : 2 * hd] + hp[:, hd : 2 * hd])
            n = ad.tanh(xi[:, 2 * hd :] + r * hp[:, 2 * hd :])
            h = n + z * (h - n)
            outs.append(h)
        return ad.stack(outs, axis=1), h

    def _encode_gru(self, x: np.ndarray, ctx: "_SiteContext") -> tuple[Tensor, Tensor | None]:
        h = ctx.site("encoder", 0, ad.embedding(self.params["embed"], x))
        final = None
        for l in range(1, self.config.num_encoder_layers + 1):
            h, final = self._gru(f"enc{l}_gru_", h, None)
            h = ctx.site("encoder", l, h)
        return h, final

    def _decode_gru(self, memory: Tensor, final: Tensor | None, y_in: np.ndarray, ctx: "_SiteContext") -> Tensor:
        p = self.params
        h = ctx.site("decoder", 0, ad.embedding(p["embed"], y_in))
        init = ad.tanh(final @ p["bridge_w"] + p["bridge_b"]) if final is not None else None
        for l in range(1, self.config.num_decoder_layers + 1):
            h, _ = self._gru(f"dec{l}_gru_", h, init)
            h = ctx.site("decoder", l, h)
        if memory.shape[-1] != h.shape[-1]:
            memory = memory @ p["mem_proj"]
        scores = ad.scale(h @ memory.swapaxes(-1, -2), 1.0 / np.sqrt(h.shape[-1]))
        context = ad.softmax(scores, axis=-1) @ memory
        return ad.tanh(ad.concat([h, context], axis=-1) @ p["comb_w"] + p["comb_b"])

    # -- convenience views -------------------------------------------
    def teacher_forced_dist(self, x, y, perturb=None) -> np.ndarray:
        """|y| x |V| matrix of next-token distributions under teacher forcing."""
        if perturb:
            perturb = {s: _batched(v) for s, v in perturb.items()}
        with ad.no_grad():
            out = self.forward(x, y, perturb)
        return np.exp(out.logp.data[0])

    def sequence_logprob(self, x, y) -> float:
        """Sum over t of log p(y_t | y_<t, x)."""
        return float(self.sequence_logprobs(as_batch(x), as_batch(y))[0])

    def sequence_logprobs(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        xs, ys = as_batch(xs), as_batch(ys)
        with ad.no_grad():
            logp = self.forward(xs, ys).logp.data
        picked = np.take_along_axis(logp, ys[:, :, None], axis=-1)[..., 0]
        return picked.sum(axis=1)

    def greedy_decode(self, x, max_len: int | None = None) -> list[int]:
        return self.greedy_decode_batch(as_batch(x), max_len)[0]

    def greedy_decode_batch(self, xs: np.ndarray, max_len: int | None = None) -> list[list[int]]:
        """Argmax decoding from BOS; rows stop at EOS (not returned) or max length.

        ``np.argmax`` returns the first maximal index, so ties resolve to the
        smaller token id.
        """
        xs = as_batch(xs)
        max_len = self.config.max_decode_len if max_len is None else max_len
        b = xs.shape[0]
        out = np.zeros((b, 0), dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        with ad.no_grad():
            ctx = _SiteContext(self, {}, set(), b, {})
            if self.config.arch == "attention":
                memory = self._encode_attention(xs, ctx)
            else:
                memory, final = self._encode_gru(xs, ctx)
            for _ in range(max_len):
                y_in = np.concatenate([np.full((b, 1), BOS, dtype=np.int64), out], axis=1)
                if self.config.arch == "attention":
                    h = self._decode_attention(memory, y_in, ctx)
                else:
                    h = self._decode_gru(memory, final, y_in, ctx)
                last = h.data[:, -1, :] @ self.params["out_w"].data + self.params["out_b"].data
                nxt = np.argmax(last, axis=-1)
                nxt[done] = PAD
                out = np.concatenate([out, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        result = []
        for row in out:
            toks = []
            for t in row:
                if t == EOS:
                    break
                toks.append(int(t))
            result.append(toks)
        return result


def _batched(v):
    arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


class _SiteContext:
    """Adds perturbations at sites and records the raw activations there."""

    def __init__(self, model: Seq2Seq, perturb: dict, retain: set, batch: int, lengths: dict):
        self.model = model
        self.perturb = perturb
        self.retain = retain
        self.batch = batch
        self.lengths = lengths
        self.activations: dict[PerturbationSite, Tensor] = {}

    def site(self, side: str, layer: int, act: Tensor) -> Tensor:
        key = PerturbationSite(side, layer)
        if key in self.retain and ad.grad_enabled():
            act.retain_grad()
        self.activations[key] = act
        delta = self.perturb.get(key)
        if delta is None:
            return act
        delta = delta if isinstance(delta, Tensor) else Tensor(delta)
        if delta.ndim == 2:
            delta = delta.reshape((1,) + delta.shape)
        if delta.shape != act.shape and not (delta.shape[0] == 1 and delta.shape[1:] == act.shape[1:]):
            raise ad.ShapeError(f"perturbation at {key}: shape {delta.shape} does not match activation {act.shape}")
        return act + delta


def _init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, hd, v = cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size
    p: dict[str, np.ndarray] = {}

    def w(name, fan_in, fan_out):
        p[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    def ln(name, width):
        p[name + "_g"] = np.ones(width)
        p[name + "_b"] = np.zeros(width)

    p["embed"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(v, d))
    if cfg.arch == "attention":
        p["pos"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(cfg.max_positions, d))
        for l in range(1, cfg.num_encoder_layers + 1):
            pre = f"enc{l}_"
            for m in ("wq", "wk", "wv", "wo"):
                w(pre + "att_" + m, d, d)
            ln(pre + "ln1", d)
            w(pre + "ff_w1", d, hd)
            p[pre + "ff_b1"] = np.zeros(hd)
            w(pre + "ff_w2", hd, d)
            p[pre + "ff_b2"] = np.zeros(d)
            ln(pre + "ln2", d)
        for l in range(1, cfg.num_decoder_layers + 1):
            pre = f"dec{l}_"
            for m in ("wq", "wk", "wv", "wo"):
                w(pre + "self_" + m, d, d)
            ln(pre + "ln1", d)
            for m in ("wq", "wk", "wv", "wo"):
                w(pre + "cross_" + m, d, d)
            ln(pre + "ln2", d)
            w(pre + "ff_w1", d, hd)
            p[pre + "ff_b1"] = np.zeros(hd)
            w(pre + "ff_w2", hd, d)
            p[pre + "ff_b2"] = np.zeros(d)
            ln(pre + "ln3", d)
        top = d
    else:
        if cfg.num_encoder_layers < 1 or cfg.num_decoder_layers < 1:
            raise ValueError("gru architecture needs at least one layer per side")
        for side, n in (("enc", cfg.num_encoder_layers), ("dec", cfg.num_decoder_layers)):
            for l in range(1, n + 1):
                pre = f"{side}{l}_gru_"
                w(pre + "wx", d if l == 1 else hd, 3 * hd)
                p[pre + "bx"] = np.zeros(3 * hd)
                w(pre + "wh", hd, 3 * hd)
                p[pre + "bh"] = np.zeros(3 * hd)
        w("bridge_w", hd, hd)
        p["bridge_b"] = np.zeros(hd)
        w("mem_proj", hd, hd)
        w("comb_w", 2 * hd, hd)
        p["comb_b"] = np.zeros(hd)
        top = hd
    if cfg.output_init == "zero":
        p["out_w"] = np.zeros((top, v))
    else:
        p["out_w"] = rng.normal(0.0, 1.0 / np.sqrt(top), size=(top, v))
    p["out_b"] = np.zeros(v)
    return p


# -- checkpoints -------------------------------------------------------
#
# Layout (all integers little-endian):
#   line 1   b"ADVSEQ-CKPT 1\n"
#   8 bytes  header length n (uint64)
#   n bytes  UTF-8 JSON: {"config": {...}, "arrays": [[name, shape], ...], "meta": {...}}
#   rest     the arrays' float64 values, little-endian, row-major, in "arrays" order
#
# "arrays" lists the model parameters in construction order first, followed
# by any extra arrays (optimizer moments) named with a "state/" prefix.


def save_checkpoint(path, model: Seq2Seq, meta: dict | None = None, extra: Mapping[str, np.ndarray] | None = None) -> None:
    arrays = [(k, t.data) for k, t in model.params.items()]
    arrays += [(f"state/{k}", np.asarray(v, dtype=np.float64)) for k, v in (extra or {}).items()]
    header = {
        "config": asdict(model.config),
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Seq2Seq, dict, dict[str, np.ndarray]]:
    """Returns (model, meta, extra arrays with the ``state/`` prefix stripped)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an advseq checkpoint (bad magic/version)")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    header = json.loads(raw[off : off + n].decode("utf-8"))
    off += n
    params: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        if name.startswith("state/"):
            extra[name[len("state/") :]] = arr
        else:
            params[name] = arr
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after array data")
    model = Seq2Seq(ModelConfig(**header["config"]), params)
    return model, header["meta"], extra
