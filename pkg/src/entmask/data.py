"""Vocabulary, tokenization, corpora and deterministic batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(RESERVED_TOKENS))
SPECIAL_IDS = frozenset((PAD_ID, CLS_ID, SEP_ID, MASK_ID))
DEFAULT_MAX_LENGTH = 128


class Vocabulary:
    """Bijective token <-> id map with the reserved ids fixed at 0..4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ConfigError("vocabulary must start with the reserved tokens in canonical order")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        if len(tokens) < len(RESERVED_TOKENS) + 1:
            raise ConfigError("vocabulary needs at least one content token")
        self._itos = tokens
        self._stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    def __hash__(self):
        return hash(tuple(self._itos))

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    @property
    def content_size(self) -> int:
        return len(self._itos) - len(RESERVED_TOKENS)

    pad_id = PAD_ID
    unk_id = UNK_ID
    cls_id = CLS_ID
    sep_id = SEP_ID
    mask_id = MASK_ID

    def to_json(self) -> list[str]:
        return list(self._itos)

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocabulary(corpus: str | Iterable[str], max_size: int) -> Vocabulary:
    """Frequency-ranked whitespace vocabulary; ties broken lexicographically.

    ``max_size`` counts the reserved tokens.
    """
    if isinstance(corpus, str):
        corpus = [corpus]
    counts: Counter = Counter()
    for line in corpus:
        counts.update(line.split())
    for tok in RESERVED_TOKENS:
        counts.pop(tok, None)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    room = max_size - len(RESERVED_TOKENS)
    if room < 1:
        raise ConfigError(f"max_size {max_size} leaves no room beyond {len(RESERVED_TOKENS)} reserved tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:room]
    return Vocabulary(list(RESERVED_TOKENS) + [tok for tok, _ in ranked])


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """An unmasked, cls/sep-framed sequence of token ids."""

    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if ids.size and ids.min() < 0:
            raise DataError("token ids must be non-negative")
        if np.any(ids == MASK_ID):
            raise DataError("ground-truth sequences must not contain the mask token")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenSequence) and np.array_equal(self.ids, other.ids)

    def __hash__(self):
        return hash(self.ids.tobytes())

    def check_vocabulary(self, vocab_size: int) -> None:
        if len(self) and self.ids.max() >= vocab_size:
            raise ConfigError(f"token id {int(self.ids.max())} outside vocabulary of size {vocab_size}")

    def maskable(self) -> np.ndarray:
        """Boolean vector of positions eligible for masking."""
        return ~np.isin(self.ids, list(SPECIAL_IDS))


def tokenize(text: str, vocab: Vocabulary, max_length: int = DEFAULT_MAX_LENGTH) -> TokenSequence:
    """Whitespace-split ``text``, map OOV to unk, frame with cls/sep, truncate to ``max_length``."""
    if max_length < 3:
        raise ConfigError("max_length must leave room for cls, sep and one token")
    ids = [vocab.id(tok) for tok in text.split()][: max_length - 2]
    ids = [UNK_ID if i == MASK_ID else i for i in ids]
    return TokenSequence(np.array([CLS_ID, *ids, SEP_ID], dtype=np.int64))


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    return " ".join(vocab.token(i) for i in seq.ids if i not in (CLS_ID, SEP_ID, PAD_ID))


def read_text_corpus(path) -> list[str]:
    """Plain UTF-8 text, one document per line; blank lines are skipped."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise DataError(f"corpus file is empty: {path}")
    return lines


# synthetic corpora --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Controlled-entropy corpus.

    Each content position after the first is, with probability
    ``predictability``, the image of the previous token under a seeded
    permutation of the content vocabulary, and otherwise a uniform draw.
    """

    vocab_size: int = 32
    num_sequences: int = 200
    min_length: int = 12
    max_length: int = 24
    predictability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.predictability <= 1.0:
            raise ConfigError(f"predictability must lie in [0, 1], got {self.predictability}")
        if self.vocab_size < 1:
            raise ConfigError("synthetic vocab_size must be >= 1")
        if self.num_sequences < 1:
            raise ConfigError("num_sequences must be >= 1")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigError("need 1 <= min_length <= max_length")


def synthetic_vocabulary(content_size: int) -> Vocabulary:
    return Vocabulary(list(RESERVED_TOKENS) + [f"w{i}" for i in range(content_size)])


def successor_table(spec: SyntheticCorpusSpec) -> np.ndarray:
    """The seeded permutation used for deterministic positions (content-index space)."""
    rng = np.random.default_rng([spec.seed, 0])
    return rng.permutation(spec.vocab_size)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> list[TokenSequence]:
    table = successor_table(spec)
    rng = np.random.default_rng([spec.seed, 1])
    offset = len(RESERVED_TOKENS)
    out = []
    for _ in range(spec.num_sequences):
        n = int(rng.integers(spec.min_length, spec.max_length + 1))
        content = np.empty(n, dtype=np.int64)
        content[0] = rng.integers(spec.vocab_size)
        coins = rng.random(n)
        draws = rng.integers(spec.vocab_size, size=n)
        for j in range(1, n):
            content[j] = table[content[j - 1]] if coins[j] < spec.predictability else draws[j]
        out.append(TokenSequence(np.concatenate(([CLS_ID], content + offset, [SEP_ID]))))
    return out


def split_corpus(corpus: Sequence[TokenSequence], heldout_fraction: float = 0.05,
                 seed: int = 0) -> tuple[list[TokenSequence], list[TokenSequence]]:
    """Seeded train / held-out split; held-out gets at least one sequence."""
    if not corpus:
        raise DataError("cannot split an empty corpus")
    if not 0.0 < heldout_fraction < 1.0:
        raise ConfigError("heldout_fraction must lie in (0, 1)")
    order = np.random.default_rng([seed, 7]).permutation(len(corpus))
    n_held = max(1, int(round(heldout_fraction * len(corpus))))
    if n_held >= len(corpus):
        raise DataError("corpus too small to hold out a split")
    held = sorted(order[:n_held].tolist())
    train = sorted(order[n_held:].tolist())
    return [corpus[i] for i in train], [corpus[i] for i in held]


# batching -----------------------------------------------------------------

@dataclass
class Batch:
    """Right-padded id matrix plus attention mask; ``indices`` point back into the corpus."""

    ids: np.ndarray
    attention_mask: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def lengths(self) -> np.ndarray:
        return self.attention_mask.sum(axis=1)

    def maskable(self) -> np.ndarray:
        """Positions eligible for masking: real tokens other than cls/sep."""
        return self.attention_mask & ~np.isin(self.ids, list(SPECIAL_IDS))

    def sequence(self, row: int) -> TokenSequence:
        return TokenSequence(self.ids[row, : int(self.lengths[row])])


def collate(sequences: Sequence[TokenSequence], indices: Sequence[int] | None = None) -> Batch:
    if not sequences:
        raise DataError("cannot collate an empty list of sequences")
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    att = np.zeros((len(sequences), width), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq.ids
        att[row, : len(seq)] = True
    if indices is None:
        indices = range(len(sequences))
    return Batch(ids, att, np.asarray(list(indices), dtype=np.int64))


def batch_order(n: int, shuffle_seed: int | None) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([int(shuffle_seed), 11]).permutation(n)


def make_batches(corpus: Sequence[TokenSequence], batch_size: int,
                 shuffle_seed: int | None = None) -> Iterator[Batch]:
    """Seeded shuffle then fixed-size batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if not corpus:
        raise DataError("cannot batch an empty corpus")
    order = batch_order(len(corpus), shuffle_seed)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield collate([corpus[i] for i in idx], idx)
