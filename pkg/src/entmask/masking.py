"""Entropy-aware mask selection.

Per-position entropies come from a scoring model run on the *unmasked*
sequence. A strategy turns an entropy vector and a budget ``k`` into a set of
positions, and :func:`apply_mask` substitutes the mask token there.

Tie handling is shared by every entropy strategy: the strategy picks a window
of ranks in the ascending entropy order, which fixes the multiset of selected
entropy values; among positions sharing a value the lowest indices are used.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from .data import MASK_ID, Batch, TokenSequence, collate
from .errors import ConfigError, ContractError, SelectionError
from .ops import log_softmax_array

STRATEGIES = ("random", "high", "low", "mid", "marginal", "alternating")
ENTROPY_STRATEGIES = ("high", "low", "mid", "marginal", "alternating")
SOURCES = ("teacher", "self")


@dataclass(frozen=True)
class MaskingConfig:
    strategy: str = "random"
    mask_ratio: float = 0.15
    entropy_source: str = "teacher"
    self_start_epoch: int = 1
    strategy_seed: int = 0
    single_token: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1], got {self.mask_ratio}")
        if self.entropy_source not in SOURCES:
            raise ConfigError(f"unknown entropy_source {self.entropy_source!r}; choose from {SOURCES}")
        if self.self_start_epoch < 0:
            raise ConfigError("self_start_epoch must be >= 0")

    @property
    def uses_entropy(self) -> bool:
        return self.strategy in ENTROPY_STRATEGIES

    @property
    def cold_start(self) -> bool:
        return self.entropy_source == "self" and self.self_start_epoch == 0

    def needs_teacher(self, epochs: int | None = None) -> bool:
        """Whether any epoch in ``range(epochs)`` scores with the teacher."""
        if not self.uses_entropy:
            return False
        if self.entropy_source == "teacher":
            return True
        return self.self_start_epoch > 0 and (epochs is None or epochs > 0)


@dataclass(frozen=True, eq=False)
class MaskSet:
    """Sorted, duplicate-free mask positions for a sequence of ``length`` tokens."""

    positions: tuple
    length: int

    def __post_init__(self):
        pos = tuple(sorted(int(p) for p in self.positions))
        if len(set(pos)) != len(pos):
            raise ContractError("mask positions must be unique")
        if pos and (pos[0] < 0 or pos[-1] >= self.length):
            raise ContractError(f"mask position out of range for length {self.length}: {pos}")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)

    def __contains__(self, j) -> bool:
        return j in self.positions

    def __eq__(self, other) -> bool:
        return isinstance(other, MaskSet) and self.positions == other.positions and self.length == other.length

    def __hash__(self):
        return hash((self.positions, self.length))

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.length, dtype=bool)
        out[list(self.positions)] = True
        return out


@dataclass(frozen=True, eq=False)
class MaskedSequence:
    ids: np.ndarray
    original: TokenSequence
    mask: MaskSet

    def restore(self) -> TokenSequence:
        ids = self.ids.copy()
        for j in self.mask:
            ids[j] = self.original.ids[j]
        return TokenSequence(ids)


@dataclass(frozen=True, eq=False)
class EntropyVector:
    """Entropies in nats; non-maskable positions hold NaN and are excluded from selection."""

    values: np.ndarray
    maskable: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        maskable = (np.isfinite(values) if self.maskable is None
                    else np.asarray(self.maskable, dtype=bool).reshape(-1))
        if maskable.shape != values.shape:
            raise ContractError("maskable flags and entropy values differ in length")
        values = np.where(maskable, values, np.nan)
        if np.any(~np.isfinite(values[maskable])):
            raise ContractError("maskable positions need finite entropies")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "maskable", maskable)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def maskable_count(self) -> int:
        return int(self.maskable.sum())


# entropy ------------------------------------------------------------------

def entropy_from_logits(logits: np.ndarray) -> np.ndarray:
    """``-sum_v p log p`` over the last axis with p = softmax(logits), in float64."""
    ls = log_softmax_array(logits, axis=-1)
    p = np.exp(ls)
    return -(p * ls).sum(axis=-1)


def batch_entropies(scorer, batch: Batch) -> np.ndarray:
    """Entropy matrix (batch, length) from one eval-mode forward; NaN where not maskable."""
    if batch.ids.size and int(batch.ids.max()) >= scorer.config.vocab_size:
        raise ConfigError(
            f"scorer vocabulary ({scorer.config.vocab_size}) does not cover token id {int(batch.ids.max())}")
    logits = scorer.forward_mlm(batch, train=False).data
    ent = entropy_from_logits(logits)
    return np.where(batch.maskable(), ent, np.nan)


def token_entropies(scorer, sequence: TokenSequence) -> EntropyVector:
    """Per-position entropy of ``scorer``'s predictions for the unmasked ``sequence``."""
    batch = collate([sequence])
    return EntropyVector(batch_entropies(scorer, batch)[0], batch.maskable()[0])


# budget and selection -----------------------------------------------------

def mask_budget(maskable_count: int, mask_ratio: float, single_token: bool = False) -> int:
    """``max(1, round_half_up(ratio * m))`` capped at ``m``."""
    if maskable_count < 1:
        raise ContractError("need at least one maskable position")
    if single_token:
        return 1
    k = int((Decimal(repr(float(mask_ratio))) * maskable_count).to_integral_value(ROUND_HALF_UP))
    return min(max(1, k), maskable_count)


def _rank_window(strategy: str, m: int, k: int) -> np.ndarray:
    """Ranks (in ascending entropy order) chosen by an entropy strategy."""
    if strategy == "high":
        return np.arange(m - k, m)
    if strategy == "low":
        return np.arange(k)
    if strategy == "mid":
        off = (m - k) // 2
        return np.arange(off, off + k)
    if strategy == "marginal":
        top = math.ceil(k / 2)
        return np.concatenate((np.arange(k - top), np.arange(m - top, m)))
    raise SelectionError(f"strategy {strategy!r} has no rank window")


def select_mask(entropies: EntropyVector, k: int, strategy: str,
                coin: np.random.Generator | None = None, high_side: bool | None = None) -> MaskSet:
    """Choose ``k`` maskable positions.

    ``coin`` drives the random baseline and, when ``high_side`` is not given,
    the alternating strategy's high/low draw. Batch-level alternation passes
    ``high_side`` explicitly so that every sequence in a batch agrees.
    """
    if strategy not in STRATEGIES:
        raise SelectionError(f"unknown strategy {strategy!r}")
    candidates = np.flatnonzero(entropies.maskable)
    m = candidates.size
    if k < 0 or k > m:
        raise SelectionError(f"cannot select {k} positions from {m} maskable")
    n = len(entropies)
    if k == 0:
        return MaskSet((), n)
    if strategy == "random":
        if coin is None:
            raise SelectionError("random strategy needs a seeded generator")
        return MaskSet(tuple(coin.choice(candidates, size=k, replace=False)), n)
    if strategy == "alternating":
        if high_side is None:
            if coin is None:
                raise SelectionError("alternating strategy needs a coin or an explicit side")
            high_side = draw_side(coin)
        strategy = "high" if high_side else "low"

    vals = entropies.values[candidates]
    # ascending by value, lower index first within equal values
    order = candidates[np.lexsort((candidates, vals))]
    sorted_vals = entropies.values[order]
    ranks = _rank_window(strategy, m, k)
    wanted: dict[float, int] = {}
    for r in ranks:
        v = float(sorted_vals[r])
        wanted[v] = wanted.get(v, 0) + 1
    chosen = []
    for v, count in wanted.items():
        group = order[sorted_vals == v]  # index-ascending
        chosen.extend(group[:count].tolist())
    return MaskSet(tuple(chosen), n)


def draw_side(coin: np.random.Generator) -> bool:
    """One fair coin flip: True selects the high-entropy side."""
    return bool(coin.random() < 0.5)


def apply_mask(sequence: TokenSequence, mask: MaskSet) -> MaskedSequence:
    if mask.length != len(sequence):
        raise ContractError(f"mask built for length {mask.length}, sequence has {len(sequence)}")
    ids = np.array(sequence.ids, dtype=np.int64)
    ids[list(mask.positions)] = MASK_ID
    return MaskedSequence(ids, sequence, mask)


# batch-level masking ------------------------------------------------------

@dataclass
class BatchMask:
    """Masked input ids and boolean mask for a padded batch, plus bookkeeping."""

    input_ids: np.ndarray
    mask: np.ndarray
    masks: list[MaskSet]
    side: str | None = None
    entropies: np.ndarray | None = None

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


def mask_batch(batch: Batch, config: MaskingConfig, coin: np.random.Generator,
               entropies: np.ndarray | None = None) -> BatchMask:
    """Select and apply masks to every sequence of ``batch``.

    For the alternating strategy a single coin flip is drawn for the whole
    batch before any sequence is processed.
    """
    maskable = batch.maskable()
    strategy = config.strategy
    side = None
    if strategy == "alternating":
        side = "high" if draw_side(coin) else "low"
        strategy = side
    if config.uses_entropy and entropies is None:
        raise ContractError(f"strategy {config.strategy!r} needs entropies")
    input_ids = batch.ids.copy()
    flat = np.zeros(batch.ids.shape, dtype=bool)
    masks = []
    for row in range(len(batch)):
        n = int(batch.lengths[row])
        legal = maskable[row, :n]
        if entropies is None:
            ev = EntropyVector(np.where(legal, 0.0, np.nan), legal)
        else:
            ev = EntropyVector(entropies[row, :n], legal)
        m = ev.maskable_count
        if m == 0:
            masks.append(MaskSet((), len(ev)))
            continue
        k = mask_budget(m, config.mask_ratio, config.single_token)
        ms = select_mask(ev, k, strategy, coin)
        masks.append(ms)
        pos = list(ms.positions)
        flat[row, pos] = True
        input_ids[row, pos] = MASK_ID
    return BatchMask(input_ids, flat, masks, side, entropies)


# entropy source schedule --------------------------------------------------

def entropy_source_for_epoch(config: MaskingConfig, epoch: int, student, teacher=None):
    """Scoring model for ``epoch``: the teacher, or the student once self-masking has begun."""
    if config.entropy_source == "teacher":
        if teacher is None:
            raise ConfigError("teacher-masking requires a teacher model")
        return teacher
    if epoch < config.self_start_epoch:
        if teacher is None:
            raise ConfigError(
                f"self-masking with self_start_epoch={config.self_start_epoch} needs a teacher "
                "for the initial epochs")
        return teacher
    return student


def source_tag(config: MaskingConfig, epoch: int) -> str:
    if not config.uses_entropy:
        return "none"
    if config.entropy_source == "teacher" or epoch < config.self_start_epoch:
        return "teacher"
    return "self"


# audit trace --------------------------------------------------------------

def trace_records(epoch: int, batch_index: int, batch: Batch, bm: BatchMask,
                  strategy: str) -> Iterable[dict]:
    for row, ms in enumerate(bm.masks):
        rec = {
            "epoch": epoch,
            "batch": batch_index,
            "sequence": int(batch.indices[row]) if batch.indices.size else row,
            "strategy": strategy if bm.side is None else f"{strategy}:{bm.side}",
            "positions": list(ms.positions),
            "entropies": (None if bm.entropies is None
                          else [round(float(bm.entropies[row, j]), 6) for j in ms.positions]),
        }
        yield rec


def write_trace(fh, records: Sequence[dict]) -> None:
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
