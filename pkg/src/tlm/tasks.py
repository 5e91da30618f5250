"""Synthetic datasets and TSV ingestion.

Special ids are fixed: pad=0, bos=1, eos=2, unk=3; content tokens start at 4.
Generated train and eval splits never share an input sequence.
"""
from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .masking import ConfigError
from .transformer import BOS, EOS, PAD, UNK

FIRST_TOKEN = 4
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
TASK_KINDS = ("copy", "reverse", "parity-pattern", "tsv-classification")


class DatasetError(ValueError):
    pass


class TsvFormatError(DatasetError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


@dataclass(frozen=True)
class Example:
    tokens: tuple
    target: Union[int, tuple]


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "copy"
    vocab_size: int = 8
    min_len: int = 6
    max_len: int = 6
    train_size: int = 500
    eval_size: int = 100
    seed: int = 0
    designated_token: int = FIRST_TOKEN
    path: Optional[str] = None
    eval_path: Optional[str] = None
    tokenizer: str = "whitespace"
    eval_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind != "tsv-classification":
            if self.vocab_size < 3:
                raise ConfigError("vocab_size must be >= 3 to reserve pad/bos/eos")
            if self.vocab_size <= FIRST_TOKEN:
                raise ConfigError(f"vocab_size must exceed {FIRST_TOKEN}: ids 0-3 are pad/bos/eos/unk")
            if not 1 <= self.min_len <= self.max_len:
                raise ConfigError(f"need 1 <= min_len <= max_len, got ({self.min_len}, {self.max_len})")
            if self.train_size < 1 or self.eval_size < 0:
                raise ConfigError("train_size must be >= 1 and eval_size >= 0")
        if self.kind == "parity-pattern" and not FIRST_TOKEN <= self.designated_token < self.vocab_size:
            raise ConfigError(f"designated_token {self.designated_token} is not a content token")


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list
    eval: list
    vocab_size: int
    num_classes: int = 0
    vocab: Optional[list] = None

    @property
    def seq2seq(self) -> bool:
        return self.spec.kind in ("copy", "reverse")

    @property
    def max_input_len(self) -> int:
        """Longest model input, including the BOS/EOS slot the batcher adds."""
        longest = max((len(e.tokens) for e in self.train + self.eval), default=0)
        return longest + 1

    def token_name(self, i: int) -> str:
        if self.vocab is not None:
            return self.vocab[i]
        return SPECIALS[i] if i < FIRST_TOKEN else str(i)


def _space_size(spec: DatasetSpec) -> float:
    k = spec.vocab_size - FIRST_TOKEN
    return sum(float(k) ** n for n in range(spec.min_len, spec.max_len + 1))


def _random_sequence(spec: DatasetSpec, rng: np.random.Generator) -> tuple:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    return tuple(int(t) for t in rng.integers(FIRST_TOKEN, spec.vocab_size, size=n))


def _unique_inputs(spec: DatasetSpec, rng, accept=lambda seq, i: True) -> list:
    needed = spec.train_size + spec.eval_size
    if _space_size(spec) < needed:
        raise ConfigError(f"only {_space_size(spec):.0f} distinct sequences exist, {needed} requested")
    seen, out = set(), []
    attempts = 0
    while len(out) < needed:
        attempts += 1
        if attempts > 10_000 * needed:
            raise ConfigError("could not generate enough distinct sequences")
        seq = _random_sequence(spec, rng)
        if seq in seen or not accept(seq, len(out)):
            continue
        seen.add(seq)
        out.append(seq)
    return out


def _split(spec: DatasetSpec, examples: list) -> tuple[list, list]:
    return examples[: spec.train_size], examples[spec.train_size:]


def gen_copy(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    examples = [Example(s, s) for s in _unique_inputs(spec, rng)]
    train, ev = _split(spec, examples)
    return Dataset(spec, train, ev, spec.vocab_size)


def gen_reverse(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    examples = [Example(s, s[::-1]) for s in _unique_inputs(spec, rng)]
    train, ev = _split(spec, examples)
    return Dataset(spec, train, ev, spec.vocab_size)


def parity_label(tokens, designated: int) -> int:
    return sum(1 for t in tokens if t == designated) % 2


def gen_parity_pattern(spec: DatasetSpec) -> Dataset:
    """Label = parity of the designated token's count.

    Labels are drawn by a fair coin and sequences rejection-sampled to match,
    so the classes are balanced up to coin noise.
    """
    rng = np.random.default_rng(spec.seed)
    label_rng = np.random.default_rng([spec.seed, 1])
    wanted: list[int] = []

    def accept(seq, i):
        while len(wanted) <= i:
            wanted.append(int(label_rng.integers(2)))
        return parity_label(seq, spec.designated_token) == wanted[i]

    seqs = _unique_inputs(spec, rng, accept)
    examples = [Example(s, parity_label(s, spec.designated_token)) for s in seqs]
    train, ev = _split(spec, examples)
    return Dataset(spec, train, ev, spec.vocab_size, num_classes=2)


def _tokenize(text: str, tokenizer: str) -> list[str]:
    if tokenizer == "whitespace":
        return text.split()
    if tokenizer == "char":
        return [c for c in text if not c.isspace()]
    raise ConfigError(f"tokenizer must be 'whitespace' or 'char', got {tokenizer!r}")


def read_tsv_rows(path, tokenizer: str = "whitespace") -> list[tuple[list[str], int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TsvFormatError(path, lineno, f"expected 'text<TAB>label', found {len(parts)} field(s)")
            try:
                label = int(parts[1].strip())
            except ValueError:
                raise TsvFormatError(path, lineno, f"label {parts[1]!r} is not an integer") from None
            if label < 0:
                raise TsvFormatError(path, lineno, "label must be non-negative")
            rows.append((_tokenize(parts[0], tokenizer), label))
    return rows


def build_vocab(token_lists) -> list[str]:
    """Specials first, then tokens by descending frequency, ties broken lexicographically."""
    counts = collections.Counter(t for toks in token_lists for t in toks)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return list(SPECIALS) + ordered


@dataclass(frozen=True)
class TsvSchema:
    tokenizer: str = "whitespace"
    eval_path: Optional[str] = None
    eval_fraction: float = 0.2
    seed: int = 0


def load_tsv(path, schema: TsvSchema = TsvSchema()) -> Dataset:
    """Read ``text<TAB>label`` rows into a classification dataset.

    Without ``schema.eval_path`` a seeded ``eval_fraction`` of rows is held
    out. The vocabulary comes from the train split only; unseen tokens map to
    UNK.
    """
    rows = read_tsv_rows(path, schema.tokenizer)
    if not rows:
        raise DatasetError(f"{path}: dataset is empty")
    if schema.eval_path is not None:
        train_rows, eval_rows = rows, read_tsv_rows(schema.eval_path, schema.tokenizer)
    else:
        order = np.random.default_rng(schema.seed).permutation(len(rows))
        n_eval = int(math.floor(len(rows) * schema.eval_fraction))
        eval_idx = set(order[:n_eval].tolist())
        train_rows = [r for i, r in enumerate(rows) if i not in eval_idx]
        eval_rows = [r for i, r in enumerate(rows) if i in eval_idx]
    vocab = build_vocab(toks for toks, _ in train_rows)
    index = {t: i for i, t in enumerate(vocab)}

    def encode(rs):
        return [Example(tuple(index.get(t, UNK) for t in toks), label) for toks, label in rs]

    spec = DatasetSpec(kind="tsv-classification", path=str(path), eval_path=schema.eval_path,
                       tokenizer=schema.tokenizer, eval_fraction=schema.eval_fraction, seed=schema.seed)
    labels = [label for _, label in rows]
    return Dataset(spec, encode(train_rows), encode(eval_rows), len(vocab),
                   num_classes=max(labels) + 1, vocab=vocab)


def make_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "copy":
        return gen_copy(spec)
    if spec.kind == "reverse":
        return gen_reverse(spec)
    if spec.kind == "parity-pattern":
        return gen_parity_pattern(spec)
    if spec.path is None:
        raise ConfigError("path: tsv-classification needs a file path")
    return load_tsv(spec.path, TsvSchema(spec.tokenizer, spec.eval_path, spec.eval_fraction, spec.seed))


def export_tsv(dataset: Dataset, path, split: str = "train") -> Path:
    """Write one split as ``text<TAB>label`` rows; seq2seq targets become space-joined tokens."""
    path = Path(path)
    examples = dataset.train if split == "train" else dataset.eval
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            text = " ".join(dataset.token_name(t) for t in ex.tokens)
            if isinstance(ex.target, tuple):
                label = " ".join(dataset.token_name(t) for t in ex.target)
            else:
                label = str(ex.target)
            fh.write(f"{text}\t{label}\n")
    return path


# batching

def _pad(seqs, width: int) -> np.ndarray:
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def classification_batch(examples) -> tuple[np.ndarray, np.ndarray]:
    """``[BOS] + tokens`` right-padded; the model reads its prediction off position 0."""
    seqs = [(BOS,) + tuple(e.tokens) for e in examples]
    src = _pad(seqs, max(len(s) for s in seqs))
    return src, np.array([e.target for e in examples], dtype=np.int64)


def seq2seq_batch(examples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source, decoder input ``[BOS] + target`` and decoder target ``target + [EOS]``."""
    src = _pad([e.tokens for e in examples], max(len(e.tokens) for e in examples))
    tgt_in = [(BOS,) + tuple(e.target) for e in examples]
    tgt_out = [tuple(e.target) + (EOS,) for e in examples]
    width = max(len(s) for s in tgt_in)
    return src, _pad(tgt_in, width), _pad(tgt_out, width)
