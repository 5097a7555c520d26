"""Probe evaluation, strategy comparison and weight-divergence analysis."""

from __future__ import annotations

import dataclasses
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import RESERVED_TOKENS, TokenSequence, Vocabulary, split_corpus, tokenize
from .errors import ConfigError, DataError
from .model import EncoderConfig, EncoderModel
from .training import TrainPlan, finetune, pretrain

R = len(RESERVED_TOKENS)


# probe tasks --------------------------------------------------------------

@dataclass
class ProbeTask:
    """A small labeled classification task used to score a pretrained encoder."""

    name: str
    sequences: list[TokenSequence]
    labels: np.ndarray
    num_classes: int
    dev_fraction: float = 0.3

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sequences) != self.labels.size:
            raise DataError(f"task {self.name}: {len(self.sequences)} sequences but {self.labels.size} labels")
        if self.num_classes < 2:
            raise DataError(f"task {self.name}: needs at least two classes")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"task {self.name}: labels must lie in [0, {self.num_classes})")
        if not 0.0 < self.dev_fraction < 1.0:
            raise ConfigError("dev_fraction must lie in (0, 1)")

    def __len__(self) -> int:
        return len(self.sequences)

    def split(self, seed: int) -> tuple[list, list]:
        """Stratified train/dev split; every class appears on both sides."""
        rng = np.random.default_rng([seed, 303])
        train, dev = [], []
        for c in range(self.num_classes):
            idx = np.flatnonzero(self.labels == c)
            if idx.size < 2:
                raise DataError(f"task {self.name}: class {c} has {idx.size} examples; need 2 for a split")
            idx = rng.permutation(idx)
            n_dev = min(idx.size - 1, max(1, round(idx.size * self.dev_fraction)))
            dev.extend(idx[:n_dev].tolist())
            train.extend(idx[n_dev:].tolist())
        pair = lambda ids: [(self.sequences[i], int(self.labels[i])) for i in sorted(ids)]
        return pair(train), pair(dev)


def _content(seq: TokenSequence) -> np.ndarray:
    return seq.ids[1:-1]


def chance_task(sequences: Sequence[TokenSequence], num_classes: int = 2, seed: int = 0) -> ProbeTask:
    """Labels drawn independently of the text: nothing to learn."""
    labels = np.random.default_rng([seed, 404]).integers(0, num_classes, len(sequences))
    return ProbeTask("chance", list(sequences), labels, num_classes)


def copy_label_task(sequences: Sequence[TokenSequence], num_classes: int = 2) -> ProbeTask:
    """Label is the class bucket of the first content token."""
    seqs = [s for s in sequences if _content(s).size]
    labels = [(int(_content(s)[0]) - R) % num_classes for s in seqs]
    return ProbeTask("copy", seqs, labels, num_classes)


def presence_task(sequences: Sequence[TokenSequence]) -> ProbeTask:
    """Does the sequence contain a marker token? The marker is the one closest to a 50% hit rate."""
    seqs = [s for s in sequences if _content(s).size]
    ids = sorted({int(t) for s in seqs for t in _content(s)})
    if not ids:
        raise DataError("presence task needs content tokens")
    rate = {t: np.mean([t in _content(s) for s in seqs]) for t in ids}
    marker = min(ids, key=lambda t: (abs(rate[t] - 0.5), t))
    labels = [int(marker in _content(s)) for s in seqs]
    return ProbeTask("presence", seqs, labels, 2)


def order_task(sequences: Sequence[TokenSequence]) -> ProbeTask:
    """Is the first content token id larger than the last? Invisible to a bag of tokens."""
    seqs = [s for s in sequences if _content(s).size >= 2 and _content(s)[0] != _content(s)[-1]]
    labels = [int(_content(s)[0] > _content(s)[-1]) for s in seqs]
    return ProbeTask("order", seqs, labels, 2)


def default_tasks(sequences: Sequence[TokenSequence], seed: int = 0) -> list[ProbeTask]:
    return [chance_task(sequences, seed=seed), presence_task(sequences), order_task(sequences)]


def load_probe_file(path, vocab: Vocabulary, name: str | None = None,
                    max_length: int = 128) -> ProbeTask:
    """Read ``label<TAB>text`` lines; labels are integer class ids."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"probe file not found: {path}")
    seqs, labels = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        label, sep, text = line.partition("\t")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected 'label<TAB>text'")
        try:
            labels.append(int(label))
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {label!r} is not an integer class id") from None
        seqs.append(tokenize(text, vocab, max_length))
    if not seqs:
        raise DataError(f"{path}: no examples")
    return ProbeTask(name or path.stem, seqs, labels, max(labels) + 1)


# probe evaluation ---------------------------------------------------------

@dataclass(frozen=True)
class FinetuneSettings:
    epochs: int = 1
    learning_rate: float = 1e-2
    batch_size: int = 32
    patience: int | None = None

    @classmethod
    def from_plan(cls, plan: TrainPlan, epochs: int | None = None) -> "FinetuneSettings":
        return cls(epochs if epochs is not None else plan.finetune_epochs, plan.finetune_learning_rate,
                   plan.finetune_batch_size, plan.early_stopping_patience)


@dataclass
class ProbeResult:
    task: str
    seed: int
    accuracy: float
    majority_baseline: float
    frozen: bool
    epochs_run: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def probe_models(model: EncoderModel, task: ProbeTask, freeze: bool = True, seed: int = 0,
                 settings: FinetuneSettings | None = None) -> tuple[ProbeResult, EncoderModel, EncoderModel]:
    """Like :func:`evaluate_probe`, also returning the probe before and after fine-tuning."""
    settings = settings or FinetuneSettings()
    if model.has_classifier and model.num_classes != task.num_classes:
        raise ConfigError(f"task {task.name} has {task.num_classes} classes but the model head has "
                          f"{model.num_classes}")
    for seq in task.sequences:
        seq.check_vocabulary(model.config.vocab_size)
    train, dev = task.split(seed)
    initial = model.copy()
    if not initial.has_classifier:
        initial.attach_classifier(task.num_classes, seed=seed)
    probe = initial.copy()
    res = finetune(probe, train, dev, epochs=settings.epochs, learning_rate=settings.learning_rate,
                   freeze=freeze, batch_size=settings.batch_size, patience=settings.patience, seed=seed)
    result = ProbeResult(task.name, seed, res.accuracy, res.majority_baseline, freeze, res.epochs_run)
    return result, initial, probe


def evaluate_probe(model: EncoderModel, task: ProbeTask, freeze: bool = True, seed: int = 0,
                   settings: FinetuneSettings | None = None) -> ProbeResult:
    """Fine-tune a copy of ``model`` on ``task`` and report dev accuracy. ``model`` is untouched."""
    return probe_models(model, task, freeze, seed, settings)[0]


@dataclass
class ProbeReport:
    results: list[ProbeResult]

    @property
    def tasks(self) -> list[str]:
        return list(dict.fromkeys(r.task for r in self.results))

    @property
    def seeds(self) -> list[int]:
        return list(dict.fromkeys(r.seed for r in self.results))

    def per_seed(self, task: str) -> dict[int, float]:
        return {r.seed: r.accuracy for r in self.results if r.task == task}

    def task_mean(self, task: str) -> float:
        return float(np.mean(list(self.per_seed(task).values())))

    def total(self) -> float:
        """Average over tasks of the per-task (seed-averaged) scores."""
        return float(np.mean([self.task_mean(t) for t in self.tasks]))

    def total_for_seed(self, seed: int) -> float:
        return float(np.mean([r.accuracy for r in self.results if r.seed == seed]))

    def to_dict(self) -> dict:
        return {
            "tasks": {t: {"seeds": {str(s): a for s, a in self.per_seed(t).items()}, "mean": self.task_mean(t)}
                      for t in self.tasks},
            "total": self.total(),
            "total_per_seed": {str(s): self.total_for_seed(s) for s in self.seeds},
            "results": [r.to_dict() for r in self.results],
        }


def evaluate_probes(model: EncoderModel, tasks: Sequence[ProbeTask], seeds: Sequence[int] = (0, 1),
                    freeze: bool = True, settings: FinetuneSettings | None = None) -> ProbeReport:
    if not tasks:
        raise ConfigError("no probe tasks given")
    return ProbeReport([evaluate_probe(model, t, freeze, s, settings) for t in tasks for s in seeds])


# weight divergence --------------------------------------------------------

def _layer_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "layers":
        return f"layer.{parts[1]}"
    return {"embeddings": "embeddings", "mlm": "mlm", "classifier": "head"}.get(parts[0], parts[0])


def _component_of(name: str) -> str:
    parts = name.split(".")
    if ".norm." in f".{name}.":
        return "norm"
    if parts[0] == "layers":
        return parts[2]  # attention | ffn
    return {"classifier": "head"}.get(parts[0], parts[0])


@dataclass
class DivergenceReport:
    """Percent change per parameter: ``100 * |W_ft - W_pre|_1 / |W_pre|_1``.

    Parameters whose reference norm is zero (fresh biases) use the mean
    absolute change instead and are listed in ``zero_reference``.
    """

    parameters: dict[str, float]
    zero_reference: list[str] = field(default_factory=list)
    task: str = ""

    @staticmethod
    def _group(values: dict[str, float], key) -> dict[str, float]:
        groups = defaultdict(list)
        for name, v in values.items():
            groups[key(name)].append(v)
        return {k: float(np.mean(v)) for k, v in sorted(groups.items())}

    @property
    def by_layer(self) -> dict[str, float]:
        return self._group(self.parameters, _layer_of)

    @property
    def by_component(self) -> dict[str, float]:
        return self._group(self.parameters, _component_of)

    def to_dict(self) -> dict:
        return {"task": self.task, "parameters": dict(sorted(self.parameters.items())),
                "by_layer": self.by_layer, "by_component": self.by_component,
                "zero_reference": sorted(self.zero_reference)}

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def weight_divergence(pretrained: EncoderModel, finetuned: EncoderModel, task: str = "") -> DivergenceReport:
    if pretrained.config != finetuned.config:
        raise ConfigError("weight_divergence needs two models with the same configuration")
    if set(pretrained.params) != set(finetuned.params):
        missing = sorted(set(pretrained.params) ^ set(finetuned.params))
        raise ConfigError(f"parameter names differ between models: {missing[:5]}")
    out, zero_ref = {}, []
    for name, p in pretrained.params.items():
        ref = p.data.astype(np.float64)
        diff = np.abs(finetuned.params[name].data.astype(np.float64) - ref).sum()
        norm = np.abs(ref).sum()
        if norm == 0.0:
            zero_ref.append(name)
            out[name] = 100.0 * float(diff) / ref.size
        else:
            out[name] = 100.0 * float(diff / norm)
    return DivergenceReport(out, zero_ref, task)


# strategy comparison ------------------------------------------------------

# plan fields a comparison is allowed to vary
_VARIANT_FIELDS = {"masking", "kd_mode", "kd_weight", "kd_temperature", "run_seed"}


@dataclass(frozen=True)
class Variant:
    name: str
    plan: TrainPlan
    model: EncoderConfig


def check_comparable(variants: Sequence[Variant]) -> None:
    if len(variants) < 2:
        raise ConfigError("a comparison needs at least two plans")
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate plan names: {names}")
    first = variants[0]
    for v in variants[1:]:
        if v.model != first.model:
            raise ConfigError(f"plan {v.name!r} uses a different model preset than {first.name!r}")
        for f in dataclasses.fields(TrainPlan):
            if f.name in _VARIANT_FIELDS:
                continue
            if getattr(v.plan, f.name) != getattr(first.plan, f.name):
                raise ConfigError(f"plan {v.name!r} differs from {first.name!r} in {f.name!r}; "
                                  "only masking and distillation settings may vary")


def default_grid(base: TrainPlan, self_start_epoch: int = 1) -> list[tuple[str, TrainPlan]]:
    """Baseline, the five teacher-masked strategies, self-masking and both distillation modes."""
    m = base.masking

    def masked(strategy, **kw):
        return dataclasses.replace(m, strategy=strategy, **kw)

    self_init = masked("high", entropy_source="self", self_start_epoch=self_start_epoch)
    return [
        ("baseline", base.replace(masking=masked("random"), kd_mode="off")),
        ("max", base.replace(masking=masked("high", entropy_source="teacher"), kd_mode="off")),
        ("min", base.replace(masking=masked("low", entropy_source="teacher"), kd_mode="off")),
        ("mid", base.replace(masking=masked("mid", entropy_source="teacher"), kd_mode="off")),
        ("marg", base.replace(masking=masked("marginal", entropy_source="teacher"), kd_mode="off")),
        ("alt", base.replace(masking=masked("alternating", entropy_source="teacher"), kd_mode="off")),
        ("self-cold", base.replace(masking=masked("high", entropy_source="self", self_start_epoch=0),
                                   kd_mode="off")),
        ("self-init", base.replace(masking=self_init, kd_mode="off")),
        ("kd-complete", base.replace(masking=self_init, kd_mode="complete_transfer")),
        ("kd-after-init", base.replace(masking=self_init, kd_mode="transfer_after_init")),
    ]


@dataclass
class ComparisonRow:
    name: str
    strategy: str
    probes: ProbeReport
    heldout_loss: dict[int, float]

    @property
    def mean_heldout_loss(self) -> float:
        return float(np.mean(list(self.heldout_loss.values())))

    def to_dict(self) -> dict:
        d = self.probes.to_dict()
        d.pop("results")
        return {"name": self.name, "strategy": self.strategy, **d,
                "heldout_mlm_loss": {"seeds": {str(s): v for s, v in self.heldout_loss.items()},
                                     "mean": self.mean_heldout_loss}}


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    tasks: list[str]
    seeds: list[int]

    def to_dict(self) -> dict:
        return {"tasks": self.tasks, "seeds": self.seeds, "rows": [r.to_dict() for r in self.rows]}

    def render(self) -> str:
        head = ["plan", "strategy", *self.tasks, "Total", "heldout"]
        body = []
        for r in self.rows:
            cells = [r.name, r.strategy]
            cells += [f"{100 * r.probes.task_mean(t):.2f}" for t in self.tasks]
            cells += [f"{100 * r.probes.total():.2f}", f"{r.mean_heldout_loss:.4f}"]
            body.append(cells)
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        fmt = lambda cells: "  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                                      for i, (c, w) in enumerate(zip(cells, widths)))
        lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(c) for c in body]
        lines.append("")
        lines.append("per seed: " + "; ".join(
            f"{r.name} " + " ".join(f"s{s}={100 * r.probes.total_for_seed(s):.2f}/{r.heldout_loss[s]:.4f}"
                                    for s in self.seeds) for r in self.rows))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        j = out_dir / "comparison.json"
        t = out_dir / "comparison.txt"
        j.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        t.write_text(self.render(), encoding="utf-8")
        return j, t


def strategy_experiment(variants: Sequence[Variant], corpus: Sequence[TokenSequence],
                        tasks: Sequence[ProbeTask], teacher: EncoderModel | None = None,
                        seeds: Sequence[int] = (0, 1), freeze: bool = True,
                        settings: FinetuneSettings | None = None, heldout: Sequence[TokenSequence] | None = None,
                        out_dir=None) -> ComparisonTable:
    """Pretrain every variant under every seed, then score it on the probe tasks.

    Without an explicit ``heldout`` split, one is carved from ``corpus`` using
    the shared plan's held-out fraction.
    """
    check_comparable(variants)
    if not tasks:
        raise ConfigError("no probe tasks given")
    first = variants[0].plan
    if heldout is None:
        train, heldout = split_corpus(corpus, first.heldout_fraction, seed=0)
    else:
        train = list(corpus)
    rows = []
    for v in variants:
        results, losses = [], {}
        for seed in seeds:
            plan = v.plan.replace(run_seed=seed)
            student = EncoderModel(v.model, seed=seed)
            run_dir = None if out_dir is None else Path(out_dir) / f"{v.name}-seed{seed}"
            res = pretrain(plan, train, student, teacher if plan.needs_teacher() else None, heldout,
                           out_dir=run_dir, run_id=v.name)
            losses[seed] = res.final_heldout_loss
            results += [evaluate_probe(student, t, freeze, seed, settings) for t in tasks]
        rows.append(ComparisonRow(v.name, v.plan.masking.strategy, ProbeReport(results), losses))
    table = ComparisonTable(rows, [t.name for t in tasks], list(seeds))
    if out_dir is not None:
        table.write(out_dir)
    return table
