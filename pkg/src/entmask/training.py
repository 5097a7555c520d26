"""MLM pretraining with pluggable masking, distillation and fine-tuning."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ops
from .data import Batch, TokenSequence, collate, make_batches
from .errors import ConfigError, ContractError, DataError, TrainingDivergedError
from .masking import (
    MaskingConfig,
    MaskSet,
    batch_entropies,
    entropy_source_for_epoch,
    mask_batch,
    source_tag,
    trace_records,
    write_trace,
)
from .model import EncoderModel, save_checkpoint
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

KD_MODES = ("off", "complete_transfer", "transfer_after_init")

# named random sub-streams derived from the run seed
_SHUFFLE, _DROPOUT, _COIN, _EVAL, _FINETUNE = 1, 2, 3, 4, 5


def substream(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, *[int(k) for k in keys]])


# losses -------------------------------------------------------------------

def _mask_bool(mask, shape) -> np.ndarray:
    if isinstance(mask, MaskSet):
        mask = mask.as_bool()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ContractError(f"mask shape {mask.shape} does not match token shape {tuple(shape)}")
    return mask


def _masked_rows(logits: Tensor, mask: np.ndarray) -> Tensor:
    vocab = logits.shape[-1]
    flat = ops.reshape(logits, (-1, vocab))
    return ops.index(flat, np.flatnonzero(mask.reshape(-1)))


def mlm_loss(logits: Tensor, original, mask, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of the original tokens at masked positions.

    ``reduction="mean"`` averages over masked positions; ``"sum"`` gives the
    plain summed objective.
    """
    if isinstance(original, TokenSequence):
        original = original.ids
    original = np.asarray(original, dtype=np.int64)
    mask = _mask_bool(mask, original.shape)
    if logits.shape[:-1] != original.shape:
        raise ContractError(f"logits {logits.shape} do not match targets {original.shape}")
    if not mask.any():
        raise ContractError("mlm_loss needs at least one masked position")
    rows = _masked_rows(logits, mask)
    return ops.cross_entropy(rows, original.reshape(-1)[mask.reshape(-1)], reduction=reduction)


def kd_loss(student_logits: Tensor, teacher_logits, mask, temperature: float = 1.0) -> Tensor:
    """Soft cross-entropy from the teacher distribution to the student's, over masked positions.

    The teacher side is a constant; no gradient flows back into it.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise ContractError(f"student logits {student_logits.shape} vs teacher logits {t.shape}")
    mask = _mask_bool(mask, student_logits.shape[:-1])
    if not mask.any():
        raise ContractError("kd_loss needs at least one masked position")
    vocab = t.shape[-1]
    t_rows = t.reshape(-1, vocab)[mask.reshape(-1)].astype(np.float64) / temperature
    target = np.exp(ops.log_softmax_array(t_rows))
    s_rows = _masked_rows(student_logits, mask)
    if temperature != 1.0:
        s_rows = ops.mul(s_rows, 1.0 / temperature)
    return ops.soft_cross_entropy(s_rows, target)


def combined_loss(mlm: Tensor, kd: Tensor | None, w: float) -> Tensor:
    """``(1 - w) * mlm + w * kd``; plain ``mlm`` when there is no distillation term."""
    if kd is None:
        return mlm
    return ops.add(ops.mul(mlm, 1.0 - w), ops.mul(kd, w))


# optimizer ----------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerSettings:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"  # or "linear" decay to zero over total_steps

    def __post_init__(self):
        if self.schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")


class Adam:
    """Adam over a name -> Tensor mapping. Gradients are cleared after each step."""

    def __init__(self, lr: float, settings: OptimizerSettings | None = None, total_steps: int | None = None):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        self.settings = settings or OptimizerSettings()
        self.total_steps = total_steps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        if self.settings.schedule == "linear" and self.total_steps:
            return self.lr * max(0.0, 1.0 - self.t / self.total_steps)
        return self.lr

    def step(self, params: dict[str, Tensor]) -> None:
        s = self.settings
        missing = [n for n, p in params.items() if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for trainable parameters: {missing[:5]}")
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - s.beta1 ** self.t
        c2 = 1.0 - s.beta2 ** self.t
        for name, p in params.items():
            g = p.grad.astype(np.float64)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = s.beta1 * m + (1.0 - s.beta1) * g
            v = s.beta2 * self.v[name] + (1.0 - s.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + s.eps)
            new = p.data.astype(np.float64) - lr * update
            if s.weight_decay:
                new -= lr * s.weight_decay * p.data
            p.data = new.astype(p.data.dtype)
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


def optimizer_step(params: dict[str, Tensor], optimizer: Adam) -> None:
    optimizer.step(params)


# plans and records --------------------------------------------------------

@dataclass(frozen=True)
class TrainPlan:
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    epochs: int = 10
    learning_rate: float = 1e-4
    batch_size: int = 32
    kd_mode: str = "off"
    kd_weight: float = 0.5
    kd_temperature: float = 1.0
    early_stopping_patience: int = 5
    run_seed: int = 0
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    heldout_fraction: float = 0.05
    heldout_mask_ratio: float = 0.15
    loss_reduction: str = "mean"
    finetune_learning_rate: float = 5e-5
    finetune_batch_size: int = 32
    finetune_epochs: int = 50

    def __post_init__(self):
        if self.kd_mode not in KD_MODES:
            raise ConfigError(f"unknown kd_mode {self.kd_mode!r}; choose from {KD_MODES}")
        if not 0.0 <= self.kd_weight <= 1.0:
            raise ConfigError("kd_weight must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.finetune_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("loss_reduction must be 'mean' or 'sum'")
        if self.early_stopping_patience < 1:
            raise ConfigError("early_stopping_patience must be >= 1")

    def replace(self, **changes) -> "TrainPlan":
        return dataclasses.replace(self, **changes)

    def needs_teacher(self) -> bool:
        return self.kd_mode != "off" or self.masking.needs_teacher(self.epochs)

    def kd_active(self, epoch: int) -> bool:
        if self.kd_mode == "complete_transfer":
            return True
        if self.kd_mode == "transfer_after_init":
            return epoch >= self.masking.self_start_epoch
        return False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class StepRecord:
    epoch: int
    step: int
    mlm_loss: float
    total_loss: float
    masked_tokens: int
    entropy_source: str
    kd_loss: float | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["kd_loss"] is None:
            del d["kd_loss"]
        return d


@dataclass
class EpochSummary:
    epoch: int
    train_loss: float
    heldout_mlm_loss: float
    steps: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PretrainResult:
    model: EncoderModel
    records: list[StepRecord]
    epochs: list[EpochSummary]

    @property
    def final_heldout_loss(self) -> float:
        return self.epochs[-1].heldout_mlm_loss


# evaluation helpers -------------------------------------------------------

def heldout_masks(heldout: Sequence[TokenSequence], batch_size: int, ratio: float,
                  seed: int) -> list[tuple[Batch, np.ndarray, np.ndarray]]:
    """Fixed random masks over the held-out split, identical for every model scored on it."""
    cfg = MaskingConfig(strategy="random", mask_ratio=ratio)
    out = []
    coin = substream(seed, _EVAL)
    for batch in make_batches(heldout, batch_size, shuffle_seed=None):
        bm = mask_batch(batch, cfg, coin)
        out.append((batch, bm.input_ids, bm.mask))
    return out


def heldout_mlm_loss(model: EncoderModel, prepared) -> float:
    """Token-weighted mean masked-token NLL over prepared held-out batches."""
    total, count = 0.0, 0
    for batch, input_ids, mask in prepared:
        if not mask.any():
            continue
        logits = model.forward_mlm(input_ids, train=False, attention_mask=batch.attention_mask)
        loss = mlm_loss(logits, batch.ids, mask, reduction="sum")
        total += loss.item()
        count += int(mask.sum())
    if count == 0:
        raise DataError("held-out split has no maskable tokens")
    return total / count


# pretraining --------------------------------------------------------------

class Trainer:
    """Epoch-granular MLM pretraining.

    Every random stream is derived from ``(run_seed, epoch, step)``, so a
    trainer whose student and optimizer state are injected at an epoch
    boundary continues exactly like one that trained up to it.
    """

    def __init__(self, plan: TrainPlan, train: Sequence[TokenSequence], student: EncoderModel,
                 teacher: EncoderModel | None = None, heldout: Sequence[TokenSequence] | None = None,
                 out_dir=None, mask_trace: bool = False, run_id: str = "run",
                 checkpoint_meta: dict | None = None):
        if not train:
            raise DataError("empty training corpus")
        if plan.needs_teacher() and teacher is None:
            raise ConfigError(
                f"plan needs a teacher (strategy={plan.masking.strategy}, source={plan.masking.entropy_source}, "
                f"self_start_epoch={plan.masking.self_start_epoch}, kd_mode={plan.kd_mode})")
        if teacher is not None and teacher.config.vocab_size != student.config.vocab_size:
            raise ConfigError(
                f"teacher vocabulary {teacher.config.vocab_size} != student vocabulary {student.config.vocab_size}")
        for seq in train:
            seq.check_vocabulary(student.config.vocab_size)
        self.plan = plan
        self.train = list(train)
        self.heldout = list(heldout) if heldout else []
        self.student = student
        self.teacher = teacher
        steps_per_epoch = math.ceil(len(self.train) / plan.batch_size)
        self.steps_per_epoch = steps_per_epoch
        self.optimizer = Adam(plan.learning_rate, plan.optimizer, total_steps=steps_per_epoch * plan.epochs)
        self.records: list[StepRecord] = []
        self.summaries: list[EpochSummary] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.mask_trace = mask_trace
        self.run_id = run_id
        self.checkpoint_meta = checkpoint_meta
        self._teacher_cache: dict[int, np.ndarray] = {}
        self._prepared = (heldout_masks(self.heldout, plan.batch_size, plan.heldout_mask_ratio, plan.run_seed)
                          if self.heldout else None)

    # state injection for schedule tests and resumption
    def inject_state(self, student: EncoderModel, optimizer_state: dict) -> None:
        self.student.load_state_dict(student.state_dict())
        self.optimizer.load_state_dict(optimizer_state)

    def _entropies(self, epoch: int, batch: Batch) -> np.ndarray | None:
        masking = self.plan.masking
        if not masking.uses_entropy:
            return None
        scorer = entropy_source_for_epoch(masking, epoch, self.student, self.teacher)
        if scorer is self.teacher and self.teacher is not None:
            # the teacher is frozen, so its entropies never change
            missing = [i for i in batch.indices.tolist() if i not in self._teacher_cache]
            if missing:
                ent = batch_entropies(self.teacher, batch)
                for row, idx in enumerate(batch.indices.tolist()):
                    self._teacher_cache.setdefault(idx, ent[row, : int(batch.lengths[row])])
            out = np.full(batch.ids.shape, np.nan)
            for row, idx in enumerate(batch.indices.tolist()):
                cached = self._teacher_cache[idx]
                out[row, : cached.shape[0]] = cached
            return out
        return batch_entropies(scorer, batch)

    def masks_for_epoch(self, epoch: int) -> dict[int, MaskSet]:
        """Masks the plan would apply in ``epoch`` (no parameter updates), keyed by corpus index."""
        out = {}
        coin = substream(self.plan.masking.strategy_seed, _COIN, self.plan.run_seed, epoch)
        for batch in make_batches(self.train, self.plan.batch_size, self._shuffle_seed(epoch)):
            bm = mask_batch(batch, self.plan.masking, coin, self._entropies(epoch, batch))
            for row, idx in enumerate(batch.indices.tolist()):
                out[idx] = bm.masks[row]
        return out

    def _shuffle_seed(self, epoch: int) -> int:
        return int(substream(self.plan.run_seed, _SHUFFLE, epoch).integers(2**31))

    def run_epoch(self, epoch: int) -> EpochSummary:
        plan = self.plan
        coin = substream(plan.masking.strategy_seed, _COIN, plan.run_seed, epoch)
        kd_on = plan.kd_active(epoch)
        tag = source_tag(plan.masking, epoch)
        trace_fh = None
        if self.mask_trace and self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            trace_fh = open(self.out_dir / "mask_trace.jsonl", "a", encoding="utf-8")
        losses = []
        try:
            for b_idx, batch in enumerate(make_batches(self.train, plan.batch_size, self._shuffle_seed(epoch))):
                step = epoch * self.steps_per_epoch + b_idx
                bm = mask_batch(batch, plan.masking, coin, self._entropies(epoch, batch))
                if trace_fh is not None:
                    write_trace(trace_fh, trace_records(epoch, b_idx, batch, bm, plan.masking.strategy))
                if not bm.mask.any():
                    continue
                teacher_logits = None
                if kd_on:
                    teacher_logits = self.teacher.forward_mlm(
                        bm.input_ids, train=False, attention_mask=batch.attention_mask).data
                rng = substream(plan.run_seed, _DROPOUT, epoch, b_idx)
                with Tape():
                    logits = self.student.forward_mlm(bm.input_ids, train=True, rng=rng,
                                                      attention_mask=batch.attention_mask)
                    mlm = mlm_loss(logits, batch.ids, bm.mask, reduction=plan.loss_reduction)
                    kd = kd_loss(logits, teacher_logits, bm.mask, plan.kd_temperature) if kd_on else None
                    total = combined_loss(mlm, kd, plan.kd_weight)
                rec = StepRecord(epoch, step, mlm.item(), total.item(), bm.num_masked, tag,
                                 None if kd is None else kd.item())
                if not math.isfinite(rec.total_loss):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}", rec)
                backward(total)
                self.optimizer.step(self.student.params)
                self.records.append(rec)
                losses.append(rec.total_loss)
        finally:
            if trace_fh is not None:
                trace_fh.close()
        heldout = heldout_mlm_loss(self.student, self._prepared) if self._prepared else float("nan")
        summary = EpochSummary(epoch, float(np.mean(losses)) if losses else float("nan"), heldout, len(losses))
        self.summaries.append(summary)
        log.info("epoch %d train %.4f heldout %.4f (%s)", epoch, summary.train_loss, heldout, tag)
        if self.out_dir is not None:
            self._write_epoch(epoch, summary)
        return summary

    def _write_epoch(self, epoch: int, summary: EpochSummary) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
            for rec in self.records:
                if rec.epoch == epoch:
                    fh.write(json.dumps({"type": "step", **rec.to_dict()}, sort_keys=True) + "\n")
            fh.write(json.dumps({"type": "epoch", **summary.to_dict()}, sort_keys=True) + "\n")
        meta = {**(self.checkpoint_meta or {}), "run_id": self.run_id, "epoch": epoch}
        save_checkpoint(self.student, self.out_dir / f"{self.run_id}-epoch{epoch:03d}.ckpt", meta=meta)

    def fit(self, start_epoch: int = 0) -> PretrainResult:
        for epoch in range(start_epoch, self.plan.epochs):
            self.run_epoch(epoch)
        return PretrainResult(self.student, self.records, self.summaries)


def pretrain(plan: TrainPlan, corpus: Sequence[TokenSequence], student: EncoderModel,
             teacher: EncoderModel | None = None, heldout: Sequence[TokenSequence] | None = None,
             out_dir=None, mask_trace: bool = False, run_id: str = "run",
             checkpoint_meta: dict | None = None) -> PretrainResult:
    """Train ``student`` in place and return it with its step log."""
    trainer = Trainer(plan, corpus, student, teacher, heldout, out_dir, mask_trace, run_id, checkpoint_meta)
    return trainer.fit()


# fine-tuning --------------------------------------------------------------

class EarlyStopping:
    """Stop once ``patience`` epochs have passed without beating the best metric."""

    def __init__(self, patience: int, mode: str = "max"):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.sign = 1.0 if mode == "max" else -1.0
        self.best: float | None = None
        self.best_epoch = -1
        self.epoch = -1

    def update(self, metric: float) -> bool:
        """Feed one epoch's metric; True means stop now."""
        self.epoch += 1
        if self.best is None or self.sign * metric > self.sign * self.best:
            self.best, self.best_epoch = metric, self.epoch
        return self.epoch - self.best_epoch >= self.patience


@dataclass
class FinetuneResult:
    accuracy: float
    majority_baseline: float
    epochs_run: int
    history: list[float]
    frozen: bool


def _labeled(examples) -> tuple[list[TokenSequence], np.ndarray]:
    seqs, labels = [], []
    for ex in examples:
        if not isinstance(ex, (tuple, list)) or len(ex) != 2 or ex[1] is None:
            raise DataError("fine-tuning needs labeled (sequence, label) pairs")
        seqs.append(ex[0])
        labels.append(int(ex[1]))
    if not seqs:
        raise DataError("empty labeled dataset")
    return seqs, np.asarray(labels, dtype=np.int64)


def classification_accuracy(model: EncoderModel, examples, batch_size: int = 64) -> float:
    seqs, labels = _labeled(examples)
    correct = 0
    for start in range(0, len(seqs), batch_size):
        batch = collate(seqs[start : start + batch_size])
        logits = model.forward_classify(batch).data
        correct += int((logits.argmax(axis=-1) == labels[start : start + batch_size]).sum())
    return correct / len(seqs)


def finetune(model: EncoderModel, train, dev, epochs: int = 1, learning_rate: float = 5e-5,
             freeze: bool = True, batch_size: int = 32, patience: int | None = None,
             seed: int = 0) -> FinetuneResult:
    """Train the classifier head (``freeze=True``) or the whole model on labeled data.

    With ``patience`` set, stops early on dev accuracy and restores the best
    weights seen.
    """
    if not model.has_classifier:
        raise ConfigError("attach a classification head before fine-tuning")
    train_seqs, train_labels = _labeled(train)
    _labeled(dev)
    # the MLM head takes no part in classification
    names = model.head_parameter_names() if freeze else [n for n in model.params if not n.startswith("mlm.")]
    trainable = {n: model.params[n] for n in names}
    optimizer = Adam(learning_rate)
    stopper = EarlyStopping(patience) if patience else None
    best_state, history = None, []
    rate = model.config.dropout_rate
    for epoch in range(epochs):
        order = substream(seed, _FINETUNE, epoch).permutation(len(train_seqs))
        for b_idx, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start : start + batch_size]
            batch = collate([train_seqs[i] for i in idx], idx)
            rng = substream(seed, _DROPOUT + 100, epoch, b_idx) if rate > 0 else None
            if freeze:
                hidden = model.encode(batch.ids, batch.attention_mask, train=False)
                with Tape():
                    loss = ops.cross_entropy(model.classify_hidden(hidden), train_labels[idx])
            else:
                with Tape():
                    logits = model.forward_classify(batch, train=True, rng=rng)
                    loss = ops.cross_entropy(logits, train_labels[idx])
            backward(loss)
            optimizer.step(trainable)
            for n in model.params:
                model.params[n].grad = None
        acc = classification_accuracy(model, dev)
        history.append(acc)
        if stopper is not None:
            if stopper.best is None or acc > stopper.best:
                best_state = {n: model.params[n].data.copy() for n in names}
            if stopper.update(acc):
                break
    if best_state is not None:
        for n, arr in best_state.items():
            model.params[n].data = arr
    _, dev_labels = _labeled(dev)
    majority = float(np.bincount(dev_labels).max() / dev_labels.size)
    return FinetuneResult(classification_accuracy(model, dev), majority, len(history), history, freeze)


def finetune_frozen(model: EncoderModel, train, dev, epochs: int = 1, learning_rate: float = 5e-5,
                    seed: int = 0, batch_size: int = 32) -> FinetuneResult:
    return finetune(model, train, dev, epochs, learning_rate, freeze=True, batch_size=batch_size, seed=seed)
