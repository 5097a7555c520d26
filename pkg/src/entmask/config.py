"""Declarative run configuration: YAML in, validated dataclasses out.

Every error names the file and line of the offending key. Unknown keys are
rejected and referenced paths must exist when the file is validated.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import SyntheticCorpusSpec
from .errors import ConfigError
from .masking import MaskingConfig
from .model import PRESETS, EncoderConfig, preset
from .training import OptimizerSettings, TrainPlan

RUN_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
DEFAULT_PROBE_TASKS = ("chance", "presence", "order")
BUILTIN_PROBES = ("chance", "presence", "order", "copy")


@dataclass(frozen=True)
class CorpusSource:
    synthetic: SyntheticCorpusSpec | None = None
    path: Path | None = None
    vocab_size: int = 5000  # file corpora: maximum vocabulary size including reserved tokens
    max_length: int = 128
    split_seed: int = 0


@dataclass(frozen=True)
class ProbeFile:
    path: Path
    name: str


@dataclass(frozen=True)
class ProbeSpec:
    tasks: tuple = DEFAULT_PROBE_TASKS
    seeds: tuple = (0, 1)
    freeze: bool = True
    epochs: int = 1
    learning_rate: float = 1e-2
    batch_size: int = 32
    patience: int | None = None
    num_examples: int = 400
    seed: int = 0


@dataclass(frozen=True)
class CompareSpec:
    plans: tuple  # (name, TrainPlan) pairs
    seeds: tuple = (0, 1)


@dataclass(frozen=True)
class RunConfig:
    source: Path
    run_id: str
    corpus: CorpusSource
    model: EncoderConfig
    model_overrides: frozenset
    plan: TrainPlan
    seed: int = 0
    output_dir: Path | None = None
    teacher: Path | None = None
    probes: ProbeSpec = field(default_factory=ProbeSpec)
    compare: CompareSpec | None = None
    mask_trace: bool = False

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# yaml with line numbers ---------------------------------------------------

class _Doc:
    """Parsed YAML plus the line of every key, addressed by key path."""

    def __init__(self, path: Path):
        self.path = path
        text = path.read_text(encoding="utf-8")
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark is not None else 0
            raise ConfigError(f"{path}:{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
        self.lines: dict[tuple, int] = {(): 1}
        if node is not None:
            self._index(node, ())

    def _index(self, node, prefix: tuple) -> None:
        if isinstance(node, yaml.MappingNode):
            seen = set()
            for key, value in node.value:
                k = key.value
                line = key.start_mark.line + 1
                if k in seen:
                    raise ConfigError(f"{self.path}:{line}: duplicate key {k!r}")
                seen.add(k)
                self.lines[prefix + (k,)] = line
                self._index(value, prefix + (k,))
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                self.lines[prefix + (i,)] = item.start_mark.line + 1
                self._index(item, prefix + (i,))

    def line(self, keys: tuple) -> int:
        while keys and keys not in self.lines:
            keys = keys[:-1]
        return self.lines.get(keys, 1)

    def error(self, keys: tuple, message: str) -> ConfigError:
        where = ".".join(str(k) for k in keys) or "<top level>"
        return ConfigError(f"{self.path}:{self.line(keys)}: {where}: {message}")


# scalar coercion ----------------------------------------------------------

def _coerce(doc: _Doc, keys: tuple, value: Any, kind: type) -> Any:
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)  # yaml 1.1 reads "1e-3" as a string
            except ValueError:
                pass
    elif kind is str:
        if isinstance(value, str):
            return value
        if value is False:
            return "off"  # bare `off` is a YAML boolean
    raise doc.error(keys, f"expected {kind.__name__}, got {value!r}")


def _section(doc: _Doc, keys: tuple, value: Any, allowed) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise doc.error(keys, f"expected a mapping, got {type(value).__name__}")
    unknown = [k for k in value if k not in allowed]
    if unknown:
        raise doc.error(keys + (unknown[0],),
                        f"unknown key {unknown[0]!r}; expected one of {sorted(allowed)}")
    return value


def _dataclass_fields(cls, skip=()) -> dict[str, type]:
    """Scalar field types of ``cls`` taken from its defaults."""
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        out[f.name] = type(default) if default is not None else int
    return out


def _build(doc: _Doc, keys: tuple, raw: dict, cls, skip=(), extra: dict | None = None):
    kinds = _dataclass_fields(cls, skip)
    values = {k: _coerce(doc, keys + (k,), v, kinds[k]) for k, v in raw.items() if k in kinds}
    try:
        return cls(**values, **(extra or {}))
    except ConfigError as exc:
        raise doc.error(keys, str(exc)) from None
    except (TypeError, ValueError) as exc:
        raise doc.error(keys, str(exc)) from None


def _existing_path(doc: _Doc, keys: tuple, value: Any) -> Path:
    if not isinstance(value, str) or not value:
        raise doc.error(keys, f"expected a path, got {value!r}")
    p = Path(value)
    if not p.is_absolute():
        p = doc.path.parent / p
    if not p.exists():
        raise doc.error(keys, f"path does not exist: {p}")
    return p


# sections -----------------------------------------------------------------

_PLAN_SKIP = ("masking", "optimizer")
_VARIANT_KEYS = {"name", "masking", "kd_mode", "kd_weight", "kd_temperature"}


def _masking(doc, keys, raw, base: MaskingConfig | None = None) -> MaskingConfig:
    raw = _section(doc, keys, raw, _dataclass_fields(MaskingConfig))
    if base is None:
        return _build(doc, keys, raw, MaskingConfig)
    kinds = _dataclass_fields(MaskingConfig)
    values = {k: _coerce(doc, keys + (k,), v, kinds[k]) for k, v in raw.items()}
    try:
        return dataclasses.replace(base, **values)
    except ConfigError as exc:
        raise doc.error(keys, str(exc)) from None


def _plan(doc, keys, raw) -> TrainPlan:
    allowed = set(_dataclass_fields(TrainPlan, _PLAN_SKIP)) | set(_PLAN_SKIP)
    raw = _section(doc, keys, raw, allowed)
    masking = _masking(doc, keys + ("masking",), raw.get("masking"))
    opt_raw = _section(doc, keys + ("optimizer",), raw.get("optimizer"), _dataclass_fields(OptimizerSettings))
    optimizer = _build(doc, keys + ("optimizer",), opt_raw, OptimizerSettings)
    return _build(doc, keys, raw, TrainPlan, _PLAN_SKIP, {"masking": masking, "optimizer": optimizer})


def _corpus(doc, keys, raw) -> CorpusSource:
    raw = _section(doc, keys, raw, {"synthetic", "path", "vocab_size", "max_length", "split_seed"})
    if ("synthetic" in raw) == ("path" in raw):
        raise doc.error(keys, "give exactly one of 'synthetic' or 'path'")
    kinds = {"vocab_size": int, "max_length": int, "split_seed": int}
    values = {k: _coerce(doc, keys + (k,), raw[k], t) for k, t in kinds.items() if k in raw}
    if "synthetic" in raw:
        sk = keys + ("synthetic",)
        syn = _build(doc, sk, _section(doc, sk, raw["synthetic"], _dataclass_fields(SyntheticCorpusSpec)),
                     SyntheticCorpusSpec)
        if "vocab_size" in raw:
            raise doc.error(keys + ("vocab_size",), "synthetic corpora set vocab_size inside 'synthetic'")
        return CorpusSource(synthetic=syn, **values)
    path = _existing_path(doc, keys + ("path",), raw["path"])
    if not path.is_file():
        raise doc.error(keys + ("path",), f"not a file: {path}")
    return CorpusSource(path=path, **values)


def _model(doc, keys, raw) -> tuple[EncoderConfig, frozenset]:
    kinds = _dataclass_fields(EncoderConfig)
    raw = _section(doc, keys, raw, set(kinds) | {"preset"})
    name = raw.get("preset", "desk")
    if name not in PRESETS:
        raise doc.error(keys + ("preset",), f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    overrides = {k: _coerce(doc, keys + (k,), v, kinds[k]) for k, v in raw.items() if k != "preset"}
    try:
        return preset(name, **overrides), frozenset(overrides)
    except ConfigError as exc:
        raise doc.error(keys, str(exc)) from None


def _probes(doc, keys, raw) -> ProbeSpec:
    allowed = {"tasks", "seeds", "freeze", "epochs", "learning_rate", "batch_size", "patience",
               "num_examples", "seed"}
    raw = _section(doc, keys, raw, allowed)
    out = {}
    if "tasks" in raw:
        tasks = raw["tasks"]
        if not isinstance(tasks, list) or not tasks:
            raise doc.error(keys + ("tasks",), "expected a non-empty list")
        parsed = []
        for i, t in enumerate(tasks):
            tk = keys + ("tasks", i)
            if isinstance(t, str):
                if t not in BUILTIN_PROBES:
                    raise doc.error(tk, f"unknown probe {t!r}; built-ins are {list(BUILTIN_PROBES)} "
                                        "or use {file: ..., name: ...}")
                parsed.append(t)
            else:
                entry = _section(doc, tk, t, {"file", "name"})
                if "file" not in entry:
                    raise doc.error(tk, "probe entry needs 'file'")
                p = _existing_path(doc, tk + ("file",), entry["file"])
                parsed.append(ProbeFile(p, str(entry.get("name", p.stem))))
        out["tasks"] = tuple(parsed)
    if "seeds" in raw:
        out["seeds"] = _seed_list(doc, keys + ("seeds",), raw["seeds"])
    kinds = {"freeze": bool, "epochs": int, "learning_rate": float, "batch_size": int, "num_examples": int,
             "seed": int}
    out.update({k: _coerce(doc, keys + (k,), raw[k], t) for k, t in kinds.items() if k in raw})
    if raw.get("patience") is not None:
        out["patience"] = _coerce(doc, keys + ("patience",), raw["patience"], int)
    for k in ("epochs", "batch_size", "num_examples"):
        if k in out and out[k] < 1:
            raise doc.error(keys + (k,), "must be >= 1")
    return ProbeSpec(**out)


def _seed_list(doc, keys, value) -> tuple:
    if not isinstance(value, list) or not value:
        raise doc.error(keys, "expected a non-empty list of seeds")
    return tuple(_coerce(doc, keys + (i,), s, int) for i, s in enumerate(value))


def _compare(doc, keys, raw, base: TrainPlan) -> CompareSpec:
    from .analysis import default_grid

    raw = _section(doc, keys, raw, {"plans", "seeds", "self_start_epoch"})
    seeds = _seed_list(doc, keys + ("seeds",), raw["seeds"]) if "seeds" in raw else (0, 1)
    plans = raw.get("plans", "default")
    if plans == "default":
        start = _coerce(doc, keys + ("self_start_epoch",), raw.get("self_start_epoch", 1), int)
        return CompareSpec(tuple(default_grid(base, start)), seeds)
    if "self_start_epoch" in raw:
        raise doc.error(keys + ("self_start_epoch",), "only used with plans: default")
    if not isinstance(plans, list):
        raise doc.error(keys + ("plans",), "expected 'default' or a list of plan variants")
    out = []
    for i, entry in enumerate(plans):
        pk = keys + ("plans", i)
        entry = _section(doc, pk, entry, _VARIANT_KEYS)
        if "name" not in entry:
            raise doc.error(pk, "plan variant needs a 'name'")
        masking = _masking(doc, pk + ("masking",), entry.get("masking"), base.masking)
        kinds = {"kd_mode": str, "kd_weight": float, "kd_temperature": float}
        changes = {k: _coerce(doc, pk + (k,), entry[k], t) for k, t in kinds.items() if k in entry}
        try:
            plan = base.replace(masking=masking, **changes)
        except ConfigError as exc:
            raise doc.error(pk, str(exc)) from None
        out.append((str(entry["name"]), plan))
    if len(out) < 2:
        raise doc.error(keys + ("plans",), "a comparison needs at least two plans")
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise doc.error(keys + ("plans",), f"duplicate plan names {names}")
    return CompareSpec(tuple(out), seeds)


TOP_LEVEL = {"run_id", "output_dir", "seed", "corpus", "model", "plan", "teacher", "probes", "compare",
             "mask_trace"}


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration file. Raises ConfigError with file:line context."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    doc = _Doc(path)
    raw = _section(doc, (), doc.data, TOP_LEVEL)
    if "run_id" not in raw:
        raise doc.error((), "missing required key 'run_id'")
    run_id = _coerce(doc, ("run_id",), raw["run_id"], str)
    if not RUN_ID.match(run_id):
        raise doc.error(("run_id",), f"run_id {run_id!r} may only contain letters, digits, '.', '_' and '-'")
    if "corpus" not in raw:
        raise doc.error((), "missing required section 'corpus'")
    corpus = _corpus(doc, ("corpus",), raw["corpus"])
    model, overrides = _model(doc, ("model",), raw.get("model"))
    plan = _plan(doc, ("plan",), raw.get("plan"))
    seed = _coerce(doc, ("seed",), raw["seed"], int) if "seed" in raw else plan.run_seed
    plan = plan.replace(run_seed=seed)
    longest = corpus.synthetic.max_length + 2 if corpus.synthetic else corpus.max_length
    if longest > model.max_position:
        raise doc.error(("model",), f"max_position {model.max_position} is shorter than the longest "
                                    f"sequence the corpus can produce ({longest})")
    out_dir = None
    if raw.get("output_dir") is not None:
        out_dir = Path(_coerce(doc, ("output_dir",), raw["output_dir"], str))
        if not out_dir.is_absolute():
            out_dir = path.parent / out_dir
    teacher = _existing_path(doc, ("teacher",), raw["teacher"]) if raw.get("teacher") is not None else None
    probes = _probes(doc, ("probes",), raw.get("probes"))
    compare = _compare(doc, ("compare",), raw["compare"], plan) if "compare" in raw else None
    mask_trace = _coerce(doc, ("mask_trace",), raw["mask_trace"], bool) if "mask_trace" in raw else False
    return RunConfig(path, run_id, corpus, model, overrides, plan, seed, out_dir, teacher, probes, compare,
                     mask_trace)
