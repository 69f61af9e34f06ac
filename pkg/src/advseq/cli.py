"""Command-line entry points: gen-data, train, attack, eval, layer-sweep, report.

Settings come from (lowest to highest precedence) built-in defaults, a
``--config`` file of ``key=value`` lines, ``--set key=value`` pairs and
explicit flags. Every command writes its fully resolved settings and the
package version into its outputs. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .attacker import AttackBudget, dump_line, relative_decrease, robustness_eval
from .metrics import TableRecord, parent_lite, perplexity
from .model import PerturbationSite, load_checkpoint, with_eos
from .tasks import CorpusError, CorpusSpec, open_corpus, read_key_values, write_corpus_dir
from .trainer import TrainConfig, decode_all, evaluate, train

OUTPUT_ROOT_ENV = "ADVSEQ_OUTPUT_ROOT"
PATH_KEYS = ("data", "out", "checkpoint")


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


def _parse_bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _defaults() -> dict[str, object]:
    out: dict[str, object] = {}
    for cls in (CorpusSpec, AttackBudget, TrainConfig):
        # raw field defaults, so task-dependent values are resolved per task
        out.update({f.name: f.default for f in fields(cls)})
    for k in PATH_KEYS:
        out[k] = ""
    return out


class RunConfig:
    """Flat key=value settings covering corpus, training, attack and paths."""

    def __init__(self):
        self.values = _defaults()

    def set(self, key: str, value) -> None:
        if key not in self.values:
            raise UsageError(f"unknown config key {key!r}")
        proto = self.values[key]
        try:
            if isinstance(proto, bool):
                value = value if isinstance(value, bool) else _parse_bool(value)
            elif isinstance(proto, int):
                value = int(value)
            elif isinstance(proto, float):
                value = float(value)
            else:
                value = str(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
        self.values[key] = value

    def update_from_file(self, path) -> None:
        try:
            pairs = read_key_values(path)
        except (OSError, CorpusError) as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        for k, v in pairs.items():
            self.set(k, v)

    def _build(self, cls):
        try:
            return cls(**{f.name: self.values[f.name] for f in fields(cls)})
        except ValueError as exc:
            raise UsageError(f"invalid configuration: {exc}") from None

    def corpus_spec(self) -> CorpusSpec:
        return self._build(CorpusSpec)

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig)

    def attack_budget(self) -> AttackBudget:
        return self._build(AttackBudget)

    def to_lines(self, keys: Sequence[str] | None = None) -> list[str]:
        keys = keys if keys is not None else list(self.values)
        return [f"{k}={self.values[k]}" for k in keys]


def _header(cfg: RunConfig, keys: Sequence[str]) -> list[str]:
    return [f"advseq {__version__}"] + cfg.to_lines(keys)


def _keys(*classes) -> list[str]:
    out = []
    for cls in classes:
        out += [f.name for f in fields(cls) if f.name not in out]
    return out


# -- argument parsing --------------------------------------------------
TRAIN_FLAGS = {
    # flag: (config key, type)
    "--lr": ("learning_rate", float),
    "--alpha": ("alpha", float),
    "--epsilon": ("epsilon", float),
    "--k": ("k", float),
    "--ascent-steps": ("ascent_steps", int),
    "--noise-range": ("noise_range", float),
    "--smoothing": ("label_smoothing", float),
    "--epochs": ("epochs", int),
    "--batch-size": ("batch_size", int),
    "--seed": ("seed", int),
    "--site-x": ("site_x", str),
    "--site-y": ("site_y", str),
    "--target-mode": ("target_mode", str),
    "--strategy": ("strategy", str),
    "--arch": ("arch", str),
}
ABLATIONS = {
    "--no-advgrad": "advgrad",
    "--no-advswap": "advswap",
    "--no-kl": "kl",
    "--no-delta-x": "delta_x",
    "--no-delta-y": "delta_y",
}
ATTACK_FLAGS = {
    "--max-edit": ("max_edit_distance", int),
    "--neighbors": ("neighbor_count", int),
    "--skip-threshold": ("skip_threshold", float),
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of key=value lines ('#' comments)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for flag, (key, typ) in TRAIN_FLAGS.items():
        p.add_argument(flag, dest=key, type=typ, default=None)
    for flag, key in ABLATIONS.items():
        p.add_argument(flag, dest=key, action="store_const", const=False, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="advseq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"advseq {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _common(p)
    p.add_argument("--task", choices=("copy", "table"), default=None)
    p.add_argument("--seed", dest="seed", type=int, default=None)

    p = sub.add_parser("train", help="train a model on a corpus directory")
    _common(p)
    p.add_argument("--data", required=False)
    _add_train_flags(p)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)

    p = sub.add_parser("attack", help="word-swap attack against a checkpoint")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0, help="attack only the first N samples")
    p.add_argument("--workers", type=int, default=1)
    for flag, (key, typ) in ATTACK_FLAGS.items():
        p.add_argument(flag, dest=key, type=typ, default=None)
    p.add_argument("--best-of-n", dest="best_of_n", action="store_const", const=True, default=None)

    p = sub.add_parser("eval", help="clean-input metrics for a checkpoint")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)

    p = sub.add_parser("layer-sweep", help="train AdvGrad variants with perturbations moved across layers")
    _common(p)
    p.add_argument("--data")
    _add_train_flags(p)
    p.add_argument("--sides", default="x,y", help="comma list of x,y")
    p.add_argument("--layers", default="0", help="comma list of layer ids")
    p.add_argument("--steps", default="1", help="comma list of ascent step counts")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)

    p = sub.add_parser("report", help="merge attack reports into one table and series file")
    _common(p)
    p.add_argument("inputs", nargs="+", help="attack output directories")
    p.add_argument("--labels", help="comma list of column labels")
    return ap


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.update_from_file(args.config)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    for key in list(cfg.values):
        val = getattr(args, key, None)
        if val is not None and key not in PATH_KEYS:
            cfg.set(key, val)
    if getattr(args, "task", None):
        cfg.set("task", args.task)
    for key in PATH_KEYS:
        val = getattr(args, key, None)
        if val:
            cfg.set(key, val)
    if not cfg.values["out"]:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if not root:
            raise UsageError(f"--out is required (or set ${OUTPUT_ROOT_ENV})")
        cfg.set("out", str(Path(root) / args.command))
    return cfg


def _need(cfg: RunConfig, key: str) -> Path:
    if not cfg.values[key]:
        raise UsageError(f"--{key} is required")
    return Path(str(cfg.values[key]))


def _fmt(v) -> str:
    if v is None:
        return "absent"
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    text = "".join(f"# {h}\n" for h in header) + "".join("\t".join(_fmt(c) for c in r) + "\n" for r in rows)
    path.write_text(text, encoding="utf-8")


# -- commands ----------------------------------------------------------
def cmd_gen_data(args, cfg: RunConfig) -> int:
    spec = cfg.corpus_spec()
    out = write_corpus_dir(cfg.values["out"], spec, header=[f"advseq {__version__}"])
    print(f"wrote {spec.task} corpus to {out}")
    return 0


def _train_keys() -> list[str]:
    return ["data"] + _keys(TrainConfig)


def cmd_train(args, cfg: RunConfig) -> int:
    tc = cfg.train_config()
    corpus = open_corpus(_need(cfg, "data"), ("train", "valid"))
    out = Path(str(cfg.values["out"]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# advseq {__version__}\n" + "".join(ln + "\n" for ln in cfg.to_lines(_train_keys())))
    state = train(corpus.ids("train"), tc, len(corpus.vocab), log_path=out / "train.log", checkpoint_dir=out)
    ev = evaluate(state.model, corpus.ids("valid"))
    _write(out / "valid_eval.tsv", _header(cfg, _train_keys()), [("seq_acc", ev["seq_acc"]), ("bleu", ev["bleu"]), ("n", ev["n"])])
    print(f"trained {state.step} steps; valid seq_acc={ev['seq_acc']:.4f} bleu={ev['bleu']:.4f}; checkpoint {out / 'final.ckpt'}")
    return 0


def _load_model(cfg: RunConfig):
    path = _need(cfg, "checkpoint")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    model, _, _ = load_checkpoint(path)
    return model


def _subset(items: list, limit: int) -> list:
    return items[:limit] if limit and limit > 0 else items


def metric_rows(metrics: dict) -> list[tuple]:
    """Per metric: clean, adversarial and d rows."""
    rows = []
    for name, m in metrics.items():
        rows.append((name, "clean", m.clean))
        rows.append((name, "adv", m.adv))
        rows.append((name, "d", relative_decrease(m.clean, m.adv)))
    return rows


def cmd_attack(args, cfg: RunConfig) -> int:
    budget = cfg.attack_budget()
    corpus = open_corpus(_need(cfg, "data"), (args.split,))
    model = _load_model(cfg)
    if model.config.vocab_size != len(corpus.vocab):
        raise UsageError("checkpoint vocabulary does not match the corpus")
    pairs = _subset(corpus.ids(args.split), args.limit)
    tables = stop = same = None
    if corpus.tables is not None:
        tables = _subset(corpus.tables[args.split], args.limit)
        stop = corpus.vocab.encode(corpus.stopwords or [], strict=False)
    if corpus.clusters is not None:
        toks, cl = corpus.vocab.tokens, corpus.clusters
        same = lambda a, b: cl.same_cluster(toks[a], toks[b])  # noqa: E731
    tables_ids = None
    if tables is not None:
        enc = corpus.vocab.encode
        tables_ids = [TableRecord([(enc([k])[0], enc(v)) for k, v in t.pairs]) for t in tables]
    rep = robustness_eval(model, pairs, budget, tables_ids, stop or (), same, workers=args.workers)
    out = Path(str(cfg.values["out"]))
    out.mkdir(parents=True, exist_ok=True)
    keys = ["data", "checkpoint"] + _keys(AttackBudget)
    head = _header(cfg, keys) + [f"split={args.split}", f"limit={args.limit}"]
    dec = lambda i: corpus.vocab.tokens[i]  # noqa: E731
    (out / "attack_dump.tsv").write_text(
        "".join(f"# {h}\n" for h in head)
        + "# id\tskipped\tswaps\tbleu_clean\tbleu_adv\tedit_distance\n"
        + "".join(dump_line(i, r, dec) + "\n" for i, r in enumerate(rep.results)),
        encoding="utf-8",
    )
    summary = [("samples", rep.count), ("attacked", rep.attacked), ("skip_rate", rep.skip_rate),
               ("meaning_preservation", rep.meaning_preservation), ("mean_edit_distance", rep.mean_edit_distance)]
    _write(out / "report.tsv", head + ["metric\trow\tvalue"], metric_rows(rep.metrics) + [("summary", k, v) for k, v in summary])
    for name, row, val in metric_rows(rep.metrics):
        print(f"{name}\t{row}\t{_fmt(val)}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    corpus = open_corpus(_need(cfg, "data"), (args.split,))
    model = _load_model(cfg)
    pairs = _subset(corpus.ids(args.split), args.limit)
    ev = evaluate(model, pairs)
    rows = [("seq_acc", ev["seq_acc"]), ("bleu", ev["bleu"]), ("n", ev["n"])]
    if pairs:
        rows.append(("perplexity", float(np.mean([perplexity(model, x, with_eos(y)) for x, y in pairs]))))
    if corpus.tables is not None and pairs:
        enc = corpus.vocab.encode
        stop = enc(corpus.stopwords or [], strict=False)
        hyps = decode_all(model, [x for x, _ in pairs])
        scores = [
            parent_lite(h, TableRecord([(enc([k])[0], enc(v)) for k, v in t.pairs]), y, stop).as_tuple()
            for h, t, (_, y) in zip(hyps, corpus.tables[args.split], pairs)
        ]
        for j, name in enumerate(("parent_precision", "parent_recall", "parent_f1")):
            rows.append((name, float(np.mean([s[j] for s in scores]))))
    out = Path(str(cfg.values["out"]))
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "eval.tsv", _header(cfg, ["data", "checkpoint"]) + [f"split={args.split}"], rows)
    for k, v in rows:
        print(f"{k}\t{_fmt(v)}")
    return 0


def _csv(s: str, kind=str) -> list:
    try:
        return [kind(v) for v in s.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def sweep_tag(side: str, steps: int) -> str:
    base = "enc" if side == "x" else "dec"
    return base if steps == 1 else f"{base}-{steps}"


def cmd_layer_sweep(args, cfg: RunConfig) -> int:
    base = cfg.train_config()
    sides, layers, steps = _csv(args.sides), _csv(args.layers, int), _csv(args.steps, int)
    if not sides or not layers or not steps:
        raise UsageError("sides, layers and steps must be non-empty")
    if any(s not in ("x", "y") for s in sides):
        raise UsageError("sides must be drawn from x,y")
    for side in sides:
        top = base.num_encoder_layers if side == "x" else base.num_decoder_layers
        for l in layers:
            if not 0 <= l <= top:
                raise UsageError(f"layer id {l} out of range 0..{top} for side {side}")
    if any(s < 1 for s in steps):
        raise UsageError("ascent steps must be >= 1")
    corpus = open_corpus(_need(cfg, "data"), ("train", args.split))
    eval_pairs = _subset(corpus.ids(args.split), args.limit)
    rows = []
    for side in sides:
        for layer in layers:
            for n in steps:
                vals = asdict(base)
                vals.update(advswap=False, advgrad=True, ascent_steps=n)
                site = str(PerturbationSite("encoder" if side == "x" else "decoder", layer))
                vals["site_x" if side == "x" else "site_y"] = site
                tc = TrainConfig(**vals)
                state = train(corpus.ids("train"), tc, len(corpus.vocab))
                ev = evaluate(state.model, eval_pairs)
                rows.append((side, layer, n, sweep_tag(side, n), ev["bleu"], ev["seq_acc"]))
                print(f"{side}\t{layer}\t{n}\tbleu={ev['bleu']:.4f}", flush=True)
    out = Path(str(cfg.values["out"]))
    out.mkdir(parents=True, exist_ok=True)
    head = _header(cfg, _train_keys()) + [f"sides={args.sides}", f"layers={args.layers}", f"steps={args.steps}",
                                          "side\tlayer_id\tsteps\ttag\tbleu\tseq_acc"]
    _write(out / "layer_sweep.tsv", head, rows)
    return 0


def _read_report(path: Path) -> dict[tuple[str, str], str]:
    out = {}
    for line in (path / "report.tsv").read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or not line:
            continue
        name, row, val = line.split("\t")
        out[(name, row)] = val
    return out


def cmd_report(args, cfg: RunConfig) -> int:
    dirs = [Path(p) for p in args.inputs]
    labels = _csv(args.labels) if args.labels else [d.name for d in dirs]
    if len(labels) != len(dirs):
        raise UsageError("need one label per input")
    reports = [_read_report(d) for d in dirs]
    keys: list[tuple[str, str]] = []
    for r in reports:
        keys += [k for k in r if k not in keys]
    rows = [(n, row, *(r.get((n, row), "absent") for r in reports)) for n, row in keys]
    out = Path(str(cfg.values["out"]))
    out.mkdir(parents=True, exist_ok=True)
    head = [f"advseq {__version__}"] + [f"input={d}" for d in dirs] + ["metric\trow\t" + "\t".join(labels)]
    _write(out / "table.tsv", head, rows)
    series = [(lab, n, r[(n, "d")]) for lab, r in zip(labels, reports) for n, row in keys if row == "d" and (n, "d") in r]
    _write(out / "d_series.tsv", [f"advseq {__version__}", "label\tmetric\td"], series)
    for r in rows:
        print("\t".join(r))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "layer-sweep": cmd_layer_sweep,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"advseq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CorpusError, ValueError) as exc:
        print(f"advseq {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
