"""Text preprocessing, vocabularies, pairing and the 8:1:1 split."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, ParseError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)


def normalize(text: str) -> str:
    """Lowercase, turn every non-alphanumeric, non-space char into a space, squeeze."""
    chars = [c if (c.isalnum() or c.isspace()) else " " for c in text.lower()]
    return " ".join("".join(chars).split())


def tokenize(text: str) -> list[str]:
    text = normalize(text)
    return text.split(" ") if text else []


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise DataError(f"vocabulary must start with {SPECIALS}")
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise DataError(f"duplicate vocabulary token {tok!r}")
            index[tok] = i
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc.strerror}") from exc
        return cls(tuple(text.splitlines()))


def build_vocab(texts, min_freq: int = 1, max_size: int = 50_000) -> Vocabulary:
    """Rank tokens by (count desc, token asc) and keep the top ``max_size - 4``."""
    if max_size < 5:
        raise ConfigError(f"max_size must be >= 5, got {max_size}")
    counts = Counter()
    for text in texts:
        counts.update(tokenize(text))
    for special in SPECIALS:
        counts.pop(special, None)
    ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIALS + tuple(ranked[: max_size - 4]))


def encode(tokens, vocab: Vocabulary) -> list[int]:
    return [vocab.id_of(t) for t in tokens]


def decode(ids, vocab: Vocabulary) -> list[str]:
    return [vocab.tokens[i] for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]


@dataclass(frozen=True)
class ExamplePair:
    """``source`` is X; ``target`` is Y wrapped in <bos> ... <eos>."""

    source: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        if len(self.source) == 0:
            raise ContractError("source must be non-empty")
        if len(self.target) < 2:
            raise ContractError("target must hold at least <bos><eos>")

    @classmethod
    def from_tokens(cls, source, target, vocab: Vocabulary) -> "ExamplePair":
        return cls(tuple(encode(source, vocab)), (BOS_ID, *encode(target, vocab), EOS_ID))

    def check_vocab(self, vocab_size: int):
        if max(max(self.source), max(self.target)) >= vocab_size:
            raise ContractError(f"token id >= vocabulary size {vocab_size}")


@dataclass
class CorpusSplit:
    train: list
    validation: list
    test: list


def split_corpus(examples, seed: int) -> CorpusSplit:
    """Seeded shuffle, then floor(0.8n) train, floor(0.1n) validation, rest test."""
    examples = list(examples)
    n = len(examples)
    if n < 10:
        raise ConfigError("split requires n >= 10")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val = (8 * n) // 10, n // 10
    shuffled = [examples[i] for i in order]
    return CorpusSplit(
        shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]
    )


def read_text_pairs(path, mode: str = "paired-tsv", prefix_fraction: float = 0.5):
    """Read (source tokens, target tokens) from a corpus file.

    Returns the pairs and the number of documents skipped for being too short.
    """
    if mode not in ("paired-tsv", "auto-split"):
        raise ConfigError(f"unknown pairing mode {mode!r}")
    if mode == "auto-split" and not 0.0 < prefix_fraction < 1.0:
        raise ConfigError("prefix_fraction must lie in (0, 1)")
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc.strerror}") from exc

    pairs, skipped = [], 0
    for lineno, line in enumerate(lines, start=1):
        if mode == "paired-tsv":
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected exactly one TAB, found {len(parts) - 1}", lineno)
            src, tgt = tokenize(parts[0]), tokenize(parts[1])
            if not src:
                raise ParseError("empty source", lineno)
        else:
            toks = tokenize(line)
            if len(toks) < 2:
                skipped += 1
                continue
            # slack so 0.3 * 10 rounds to 3, not 4
            cut = math.ceil(prefix_fraction * len(toks) - 1e-9)
            src, tgt = toks[:cut], toks[cut:]
        pairs.append((src, tgt))
    if skipped:
        log.warning("skipped %d documents with fewer than 2 tokens", skipped)
    return pairs, skipped


def load_pairs(path, vocab: Vocabulary, mode: str = "paired-tsv", prefix_fraction: float = 0.5):
    text_pairs, _ = read_text_pairs(path, mode, prefix_fraction)
    return [ExamplePair.from_tokens(s, t, vocab) for s, t in text_pairs]


def reversal_vocab(alphabet_size: int) -> Vocabulary:
    return Vocabulary(SPECIALS + tuple(f"t{i}" for i in range(alphabet_size)))


def synth_reversal_tokens(n_examples: int, seq_len: int, alphabet_size: int, seed: int):
    """Random token strings over ``t0..t{A-1}`` paired with their reversal."""
    if n_examples < 1 or seq_len < 1 or alphabet_size < 1:
        raise ConfigError("n_examples, seq_len and alphabet_size must all be >= 1")
    draws = np.random.default_rng(seed).integers(0, alphabet_size, size=(n_examples, seq_len))
    out = []
    for row in draws:
        src = [f"t{i}" for i in row]
        out.append((src, src[::-1]))
    return out


def synth_reversal(n_examples: int, seq_len: int, alphabet_size: int, seed: int):
    """Reversal task as ExamplePairs under :func:`reversal_vocab`."""
    vocab = reversal_vocab(alphabet_size)
    return [
        ExamplePair.from_tokens(s, t, vocab)
        for s, t in synth_reversal_tokens(n_examples, seq_len, alphabet_size, seed)
    ]
