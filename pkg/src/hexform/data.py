"""Synthetic sequence tasks and TSV ingestion.

Every synthetic label is a deterministic function of the tokens, so the
Bayes accuracy is 1.0 (CLASSIFY, TAG) and regression targets carry no noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, LabelOutOfSchema, ParseError, SeqTooLong

PAD, UNK, CLS = 0, 1, 2
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]")


class TaskKind(str, Enum):
    CLASSIFY = "classify"
    REGRESS = "regress"
    TAG = "tag"


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: TaskKind = TaskKind.CLASSIFY
    vocab_size: int = 64
    seq_len: int = 16
    num_classes: int = 2
    seed: int = 0
    train_size: int = 2000
    dev_size: int = 500

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.seq_len < 4:
            raise InvalidSpec("seq_len must be at least 4")
        if self.vocab_size < len(SPECIAL_TOKENS) + 4 * self.num_classes:
            raise InvalidSpec("vocab_size too small for the planted rule")
        if self.kind is not TaskKind.REGRESS and self.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2")
        if self.train_size < 1 or self.dev_size < 1:
            raise InvalidSpec("split sizes must be positive")

    @property
    def num_labels(self):
        return 1 if self.kind is TaskKind.REGRESS else self.num_classes


def default_vocab(vocab_size):
    return list(SPECIAL_TOKENS) + [f"t{i}" for i in range(len(SPECIAL_TOKENS), vocab_size)]


@dataclass
class Dataset:
    """Padded token matrix plus labels. ``mask`` is True at padding."""

    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    kind: TaskKind
    num_labels: int
    vocab: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.tokens)

    def subset(self, idx):
        return Dataset(self.tokens[idx], self.mask[idx], self.labels[idx], self.kind, self.num_labels, self.vocab)

    def batches(self, batch_size, seed=None):
        """Yield subsets of ``batch_size``; shuffled iff ``seed`` is given."""
        order = np.arange(len(self))
        if seed is not None:
            order = np.random.default_rng(seed).permutation(len(self))
        for i in range(0, len(self), batch_size):
            yield self.subset(order[i:i + batch_size])


def _sample_lengths(rng, n, seq_len):
    return rng.integers(seq_len // 2, seq_len + 1, n)


def _planted_rule(spec):
    """Token roles drawn once from the task seed (independent of split seed)."""
    rng = np.random.default_rng(spec.seed)
    content = rng.permutation(np.arange(len(SPECIAL_TOKENS), spec.vocab_size))
    C = spec.num_classes
    if spec.kind is TaskKind.CLASSIFY:
        keywords = content[:2 * C].reshape(C, 2)
        return {"keywords": keywords, "filler": content[2 * C:]}
    if spec.kind is TaskKind.REGRESS:
        return {"feature": dict(zip(content.tolist(), rng.uniform(0.0, 1.0, len(content)).tolist()))}
    entity_classes = C - 1
    per = 3
    entities = content[:per * entity_classes].reshape(entity_classes, per)
    negators = content[per * entity_classes:per * entity_classes + 2]
    return {"entities": entities, "negators": negators, "filler": content[per * entity_classes + 2:]}


def _label_tag(seq, rule):
    tag_of = {int(t): c + 1 for c, row in enumerate(rule["entities"]) for t in row}
    neg = set(rule["negators"].tolist())
    tags = np.zeros(len(seq), dtype=np.int64)
    for i in range(1, len(seq)):
        if seq[i] in tag_of and seq[i - 1] not in neg:
            tags[i] = tag_of[seq[i]]
    return tags


def _generate(spec, rule, rng, n, seen):
    S = spec.seq_len
    tokens = np.full((n, S), PAD, dtype=np.int64)
    mask = np.ones((n, S), dtype=bool)
    if spec.kind is TaskKind.TAG:
        labels = np.zeros((n, S), dtype=np.int64)
    elif spec.kind is TaskKind.REGRESS:
        labels = np.zeros(n, dtype=np.float64)
    else:
        labels = np.zeros(n, dtype=np.int64)
    i = 0
    while i < n:
        L = int(_sample_lengths(rng, 1, S)[0])
        seq = [CLS]
        if spec.kind is TaskKind.CLASSIFY:
            y = int(rng.integers(spec.num_classes))
            body = rng.choice(rule["filler"], L - 1).tolist()
            body[int(rng.integers(L - 1))] = int(rng.choice(rule["keywords"][y]))
            seq += body
        elif spec.kind is TaskKind.REGRESS:
            seq += rng.choice(list(rule["feature"]), L - 1).tolist()
        else:
            pool = np.concatenate([rule["filler"], rule["entities"].ravel(), rule["entities"].ravel(), rule["negators"]])
            seq += rng.choice(pool, L - 1).tolist()
        key = tuple(seq)
        if key in seen:
            continue
        seen.add(key)
        tokens[i, :L] = seq
        mask[i, :L] = False
        if spec.kind is TaskKind.CLASSIFY:
            labels[i] = y
        elif spec.kind is TaskKind.REGRESS:
            labels[i] = float(np.mean([rule["feature"][t] for t in seq[1:]]))
        else:
            labels[i, :L] = _label_tag(np.array(seq), rule)
        i += 1
    return Dataset(tokens, mask, labels, spec.kind, spec.num_labels, default_vocab(spec.vocab_size))


def gen_synthetic(spec, seed=None):
    """Return ``(train, dev)``; dev sequences never occur in train."""
    if not isinstance(spec, SyntheticTaskSpec):
        raise InvalidSpec("expected a SyntheticTaskSpec")
    rule = _planted_rule(spec)
    rng = np.random.default_rng([spec.seed, 0 if seed is None else seed])
    seen = set()
    train = _generate(spec, rule, rng, spec.train_size, seen)
    dev = _generate(spec, rule, rng, spec.dev_size, seen)
    return train, dev


# -- TSV ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TsvSchema:
    """Column layout, e.g. ``TsvSchema.parse("text,label")``."""

    columns: tuple = ("text", "label")
    kind: TaskKind = TaskKind.CLASSIFY
    header: bool = False
    labels: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        cols = tuple(self.columns)
        if cols not in (("text", "label"), ("text", "text2", "label")):
            raise InvalidSpec(f"unsupported column layout {cols}")
        object.__setattr__(self, "columns", cols)
        if self.kind is TaskKind.TAG:
            raise InvalidSpec("TSV ingestion covers sequence-level tasks only")

    @classmethod
    def parse(cls, flag, kind=TaskKind.CLASSIFY, header=False, labels=None):
        return cls(tuple(c.strip() for c in flag.split(",")), kind, header, tuple(labels) if labels else None)


@dataclass
class TsvDataset:
    rows: list
    label_map: dict
    schema: TsvSchema

    def __len__(self):
        return len(self.rows)

    def shuffled(self, seed):
        order = np.random.default_rng(seed).permutation(len(self.rows))
        return [self.rows[i] for i in order]

    def to_dataset(self, vocab, max_seq_len):
        """Whitespace-tokenize into a padded :class:`Dataset` (CLS prepended)."""
        index = {w: i for i, w in enumerate(vocab)}
        n = len(self.rows)
        tokens = np.full((n, max_seq_len), PAD, dtype=np.int64)
        mask = np.ones((n, max_seq_len), dtype=bool)
        regress = self.schema.kind is TaskKind.REGRESS
        labels = np.zeros(n, dtype=np.float64 if regress else np.int64)
        for i, (text, text2, label) in enumerate(self.rows):
            words = text.split() + (text2.split() if text2 else [])
            ids = [CLS] + [index.get(w, UNK) for w in words]
            if len(ids) > max_seq_len:
                raise SeqTooLong(f"row {i}: {len(ids)} tokens > {max_seq_len}")
            tokens[i, :len(ids)] = ids
            mask[i, :len(ids)] = False
            labels[i] = float(label) if regress else self.label_map[label]
        num_labels = 1 if regress else len(self.label_map)
        return Dataset(tokens, mask, labels, self.schema.kind, num_labels, list(vocab))


def load_tsv(path, schema, write_label_map=True):
    path = Path(path)
    ncol = len(schema.columns)
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), start=1):
            if lineno == 1 and schema.header:
                continue
            if not rec or rec == [""]:
                continue
            if len(rec) != ncol:
                raise ParseError(f"expected {ncol} columns, got {len(rec)}", lineno)
            text, label = rec[0], rec[-1].strip()
            text2 = rec[1] if ncol == 3 else None
            if schema.kind is TaskKind.REGRESS:
                try:
                    float(label)
                except ValueError:
                    raise ParseError(f"non-numeric target {label!r}", lineno) from None
            elif schema.labels is not None and label not in schema.labels:
                raise LabelOutOfSchema(f"line {lineno}: label {label!r} not in {schema.labels}")
            rows.append((text, text2, label))
    if schema.kind is TaskKind.REGRESS:
        label_map = {}
    else:
        names = schema.labels if schema.labels is not None else sorted({r[2] for r in rows})
        label_map = {name: i for i, name in enumerate(names)}
    if write_label_map and label_map:
        sidecar = path.with_name(path.name + ".labels")
        sidecar.write_text("".join(f"{k}={v}\n" for k, v in label_map.items()), encoding="utf-8")
    return TsvDataset(rows, label_map, schema)


def read_label_map(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.rpartition("=")
            out[k] = int(v)
    return out
