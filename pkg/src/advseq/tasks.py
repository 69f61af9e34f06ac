"""Synthetic corpora: copy-with-synonym-clusters and toy table-to-text.

On-disk layout of a generated corpus directory::

    vocab.txt           one token per line, the four specials first
    train.tsv           one sample per line: source tokens <TAB> target tokens
    valid.tsv, test.tsv (tokens space-joined)
    corpus_spec.txt     the resolved CorpusSpec as key=value lines
    clusters.txt        copy task: one synonym cluster per line
    stopwords.txt       table task: function words ignored by parent_lite
    {split}.tables.jsonl table task: one [[key, [values...]], ...] record per sample
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import TableRecord
from .model import SPECIAL_TOKENS, Vocab

SPLITS = ("train", "valid", "test")
TASK_COUNTS = {"copy": (5000, 500, 500), "table": (4000, 400, 400)}


class CorpusError(ValueError):
    """Malformed corpus input; the message names the line (and column)."""


@dataclass
class CorpusSpec:
    task: str = "copy"  # "copy" | "table"
    seed: int = 0
    content_vocab: int = 50
    min_len: int = 8
    max_len: int = 12
    # 0 selects the task default: 5000/500/500 (copy), 4000/400/400 (table)
    n_train: int = 0
    n_valid: int = 0
    n_test: int = 0
    cluster_size: int = 5
    synonym_rate: float = 0.0
    num_keys: int = 6
    value_pool: int = 20
    min_keys: int = 4
    num_templates: int = 2

    def __post_init__(self):
        if self.task not in ("copy", "table"):
            raise ValueError(f"unknown task {self.task!r}")
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            raise ValueError("sample counts must be positive")
        for name, value in zip(("n_train", "n_valid", "n_test"), TASK_COUNTS[self.task]):
            if getattr(self, name) == 0:
                setattr(self, name, value)
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.cluster_size < 2:
            raise ValueError("cluster_size must be >= 2")
        if not 0.0 <= self.synonym_rate <= 1.0:
            raise ValueError("synonym_rate must lie in [0, 1]")
        if self.task == "table":
            if not 1 <= self.num_keys <= len(TABLE_KEYS):
                raise ValueError(f"num_keys must lie in [1, {len(TABLE_KEYS)}]")
            if not 1 <= self.min_keys <= self.num_keys:
                raise ValueError("need 1 <= min_keys <= num_keys")
            if not 1 <= self.num_templates <= len(TEMPLATES):
                raise ValueError(f"num_templates must lie in [1, {len(TEMPLATES)}]")

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @classmethod
    def from_mapping(cls, values: dict) -> "CorpusSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in values.items():
            if k not in kinds:
                raise ValueError(f"unknown corpus spec key {k!r}")
            proto = getattr(cls(), k)
            out[k] = type(proto)(v) if not isinstance(v, type(proto)) else v
        return cls(**out)


@dataclass
class Sample:
    source: list[str]
    target: list[str]


@dataclass
class SynonymClusters:
    clusters: list[list[str]]

    def __post_init__(self):
        flat = [t for c in self.clusters for t in c]
        if len(set(flat)) != len(flat):
            raise ValueError("synonym clusters overlap")
        self.cluster_of = {t: i for i, c in enumerate(self.clusters) for t in c}

    def same_cluster(self, a: str, b: str) -> bool:
        return a in self.cluster_of and self.cluster_of.get(a) == self.cluster_of.get(b)

    def save(self, path) -> None:
        Path(path).write_text("".join(" ".join(c) + "\n" for c in self.clusters), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SynonymClusters":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.split(" ") for ln in lines if ln])


# -- copy task ---------------------------------------------------------
def copy_tokens(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"w{i:0{width}d}" for i in range(n)]


def make_clusters(tokens: Sequence[str], size: int, rng: np.random.Generator) -> SynonymClusters:
    order = list(rng.permutation(len(tokens)))
    clusters = [sorted(tokens[i] for i in order[j : j + size]) for j in range(0, len(order), size)]
    if len(clusters) > 1 and len(clusters[-1]) < 2:
        clusters[-2].extend(clusters.pop())
    return SynonymClusters(sorted(clusters))


def _unique_draws(total: int, draw, seen: set) -> list:
    out = []
    while len(out) < total:
        s = draw()
        key = tuple(s[0])
        if key in seen:
            continue
        seen.add(key)
        out.append(s)
    return out


def gen_copy_corpus(spec: CorpusSpec) -> tuple[dict[str, list[Sample]], Vocab, SynonymClusters]:
    """(x, y = x) pairs of uniform random content tokens; splits are disjoint as sequences.

    With ``synonym_rate`` > 0 each source token is independently replaced by
    a random member of its synonym cluster while the target keeps the
    original token.
    """
    rng = np.random.default_rng(spec.seed)
    tokens = copy_tokens(spec.content_vocab)
    clusters = make_clusters(tokens, spec.cluster_size, rng)

    def draw():
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        y = [tokens[i] for i in rng.integers(0, len(tokens), size=n)]
        x = list(y)
        if spec.synonym_rate > 0:
            for i, t in enumerate(y):
                if rng.random() < spec.synonym_rate:
                    members = clusters.clusters[clusters.cluster_of[t]]
                    x[i] = members[int(rng.integers(0, len(members)))]
        return (x, y)

    seen: set = set()
    splits = {}
    for name, count in zip(SPLITS, (spec.n_train, spec.n_valid, spec.n_test)):
        splits[name] = [Sample(x, y) for x, y in _unique_draws(count, draw, seen)]
    return splits, Vocab(list(SPECIAL_TOKENS) + tokens), clusters


def copy_collision_probability(spec: CorpusSpec) -> float:
    """Birthday bound on any two generated sequences coinciding before dedup."""
    n = spec.n_train + spec.n_valid + spec.n_test
    lengths = range(spec.min_len, spec.max_len + 1)
    # probability two independent draws coincide
    p_pair = sum((1 / len(lengths)) ** 2 * spec.content_vocab ** (-L) for L in lengths)
    return 1.0 - math.exp(-n * (n - 1) / 2 * p_pair)


# -- table task --------------------------------------------------------
TABLE_KEYS = ("name", "born", "city", "job", "team", "award")

# Per-key clause templates; "{v}" marks the value slot.
TEMPLATES = (
    {
        "name": ["{v}"],
        "born": ["was", "born", "in", "{v}"],
        "city": ["lives", "in", "{v}"],
        "job": ["works", "as", "{v}"],
        "team": ["plays", "for", "{v}"],
        "award": ["won", "the", "{v}"],
    },
    {
        "name": ["{v}"],
        "born": ["birth", "year", "{v}"],
        "city": ["from", "{v}"],
        "job": ["a", "{v}"],
        "team": ["member", "of", "{v}"],
        "award": ["received", "{v}"],
    },
    {
        "name": ["{v}"],
        "born": ["born", "{v}"],
        "city": ["based", "in", "{v}"],
        "job": ["occupation", "{v}"],
        "team": ["with", "{v}"],
        "award": ["honoured", "with", "{v}"],
    },
)
CONNECTOR = "and"
END = "."


def table_key_token(key: str) -> str:
    return f"<{key}>"


def table_value_tokens(key: str, pool: int) -> list[str]:
    return [f"{key}_{i:02d}" for i in range(pool)]


def verbalize(record: TableRecord, template: dict) -> list[str]:
    """Template text mentioning every value exactly once."""
    out: list[str] = []
    clauses = []
    for key_tok, values in record.pairs:
        key = key_tok.strip("<>")
        words = []
        for w in template[key]:
            words.extend(values if w == "{v}" else [w])
        clauses.append(words)
    out.extend(clauses[0])
    for i, c in enumerate(clauses[1:], 1):
        if i > 1:
            out.append(CONNECTOR)
        out.extend(c)
    out.append(END)
    return out


def table_stopwords(spec: CorpusSpec) -> list[str]:
    words = {w for t in TEMPLATES[: spec.num_templates] for ws in t.values() for w in ws if w != "{v}"}
    return sorted(words | {CONNECTOR, END})


def gen_table_corpus(spec: CorpusSpec) -> tuple[dict[str, list[Sample]], Vocab, dict[str, list[TableRecord]], list[str]]:
    """Linearized "<key> value" tables with templated verbalizations.

    The name key is always present; the template is picked by the name
    value's index so it is predictable from the input.
    """
    rng = np.random.default_rng(spec.seed)
    keys = TABLE_KEYS[: spec.num_keys]
    pools = {k: table_value_tokens(k, spec.value_pool) for k in keys}

    def draw():
        n = int(rng.integers(spec.min_keys, spec.num_keys + 1))
        others = sorted(rng.choice(np.arange(1, len(keys)), size=n - 1, replace=False).tolist()) if n > 1 else []
        chosen = [0] + others
        pairs = []
        for ki in chosen:
            k = keys[ki]
            pairs.append((table_key_token(k), [pools[k][int(rng.integers(0, spec.value_pool))]]))
        rec = TableRecord(pairs)
        name_idx = int(rec.pairs[0][1][0].rsplit("_", 1)[1])
        y = verbalize(rec, TEMPLATES[name_idx % spec.num_templates])
        return (rec.linearize(), y, rec)

    seen: set = set()
    splits, tables = {}, {}
    for name, count in zip(SPLITS, (spec.n_train, spec.n_valid, spec.n_test)):
        draws = _unique_draws(count, draw, seen)
        splits[name] = [Sample(x, y) for x, y, _ in draws]
        tables[name] = [r for _, _, r in draws]
    stop = table_stopwords(spec)
    words = [table_key_token(k) for k in keys] + [v for k in keys for v in pools[k]] + stop
    return splits, Vocab(list(SPECIAL_TOKENS) + words), tables, stop


def parse_linearized_table(tokens: Sequence[str]) -> TableRecord:
    """Inverse of :meth:`TableRecord.linearize` for ``<key>`` tokens."""
    pairs: list[tuple[str, list[str]]] = []
    for tok in tokens:
        if tok.startswith("<") and tok.endswith(">"):
            pairs.append((tok, []))
        elif not pairs:
            raise CorpusError(f"value {tok!r} before any key")
        else:
            pairs[-1][1].append(tok)
    return TableRecord(pairs)


# -- serialization -----------------------------------------------------
def format_sample(s: Sample) -> str:
    return " ".join(s.source) + "\t" + " ".join(s.target)


def write_corpus(path, samples: Iterable[Sample]) -> None:
    Path(path).write_text("".join(format_sample(s) + "\n" for s in samples), encoding="utf-8")


def load_corpus(path, vocab: Vocab | None = None) -> list[Sample]:
    """Parse a corpus file; errors carry 1-based line and column numbers."""
    text = Path(path).read_text(encoding="utf-8")
    samples = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if line == "":
            continue
        if line.count("\t") != 1:
            col = len(line) + 1 if "\t" not in line else line.index("\t", line.index("\t") + 1) + 1
            raise CorpusError(f"{path}:{lineno}:{col}: expected exactly one tab between source and target")
        src, tgt = line.split("\t")
        if not src.strip() or not tgt.strip():
            col = 1 if not src.strip() else len(src) + 2
            raise CorpusError(f"{path}:{lineno}:{col}: empty {'source' if not src.strip() else 'target'}")
        s_tok, t_tok = src.split(" "), tgt.split(" ")
        if vocab is not None:
            col = 1
            for part, offset in ((s_tok, 0), (t_tok, len(src) + 1)):
                col = offset + 1
                for tok in part:
                    if tok not in vocab:
                        raise CorpusError(f"{path}:{lineno}:{col}: unknown token {tok!r}")
                    col += len(tok) + 1
        samples.append(Sample(s_tok, t_tok))
    return samples


def write_tables(path, tables: Iterable[TableRecord]) -> None:
    Path(path).write_text(
        "".join(json.dumps([[k, list(v)] for k, v in t.pairs]) + "\n" for t in tables), encoding="utf-8"
    )


def load_tables(path) -> list[TableRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        try:
            out.append(TableRecord([(k, list(v)) for k, v in json.loads(line)]))
        except (ValueError, TypeError) as exc:
            raise CorpusError(f"{path}:{lineno}: bad table record ({exc})") from None
    return out


def read_key_values(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CorpusError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_corpus_dir(out_dir, spec: CorpusSpec, header: Sequence[str] = ()) -> Path:
    """Generate the corpus for ``spec`` and write every file into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if spec.task == "copy":
        splits, vocab, clusters = gen_copy_corpus(spec)
        clusters.save(out / "clusters.txt")
    else:
        splits, vocab, tables, stop = gen_table_corpus(spec)
        for name, recs in tables.items():
            write_tables(out / f"{name}.tables.jsonl", recs)
        (out / "stopwords.txt").write_text("".join(w + "\n" for w in stop), encoding="utf-8")
    vocab.save(out / "vocab.txt")
    for name, samples in splits.items():
        write_corpus(out / f"{name}.tsv", samples)
    (out / "corpus_spec.txt").write_text("".join(f"# {h}\n" for h in header) + "\n".join(spec.to_lines()) + "\n")
    return out


@dataclass
class Corpus:
    """A generated corpus directory loaded into memory."""

    root: Path
    spec: CorpusSpec
    vocab: Vocab
    splits: dict[str, list[Sample]]
    clusters: SynonymClusters | None = None
    tables: dict[str, list[TableRecord]] | None = None
    stopwords: list[str] | None = None

    def ids(self, split: str) -> list[tuple[list[int], list[int]]]:
        enc = self.vocab.encode
        return [(enc(s.source), enc(s.target)) for s in self.splits[split]]


def open_corpus(root, splits: Sequence[str] = SPLITS) -> Corpus:
    root = Path(root)
    if not (root / "vocab.txt").exists():
        raise CorpusError(f"{root}: no vocab.txt (not a corpus directory)")
    vocab = Vocab.load(root / "vocab.txt")
    spec = CorpusSpec.from_mapping(read_key_values(root / "corpus_spec.txt"))
    data = {s: load_corpus(root / f"{s}.tsv", vocab) for s in splits}
    clusters = SynonymClusters.load(root / "clusters.txt") if (root / "clusters.txt").exists() else None
    tables = stop = None
    if spec.task == "table":
        tables = {s: load_tables(root / f"{s}.tables.jsonl") for s in splits}
        stop = (root / "stopwords.txt").read_text(encoding="utf-8").split()
    return Corpus(root, spec, vocab, data, clusters, tables, stop)
