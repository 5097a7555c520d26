"""Command-line entry point: ``entmask <command> --config run.yaml``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    FinetuneSettings,
    ProbeReport,
    ProbeTask,
    Variant,
    chance_task,
    check_comparable,
    copy_label_task,
    load_probe_file,
    order_task,
    presence_task,
    probe_models,
    strategy_experiment,
    weight_divergence,
)
from .config import ProbeFile, RunConfig, load_config
from .data import (
    TokenSequence,
    Vocabulary,
    build_vocabulary,
    generate_synthetic_corpus,
    read_text_corpus,
    split_corpus,
    synthetic_vocabulary,
    tokenize,
)
from .errors import CheckpointError, ConfigError, DataError, EntmaskError, TrainingDivergedError
from .model import EncoderConfig, EncoderModel, checkpoint_meta, load_checkpoint, save_checkpoint
from .training import pretrain

log = logging.getLogger("entmask")

OUT_ENV = "ENTMASK_OUT"
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
FINAL = "final.ckpt"


# run setup ----------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed, plan=cfg.plan.replace(run_seed=args.seed))
    if args.mask_trace:
        cfg = cfg.replace(mask_trace=True)
    return cfg


def output_root(args, cfg: RunConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir is not None:
        return cfg.output_dir
    return Path(os.environ.get(OUT_ENV, "runs"))


def fresh_dir(path: Path, force: bool) -> Path:
    """Run directories are append-only: an existing non-empty one is an error unless forced."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} already exists; choose another run_id or pass --force")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_corpus(cfg: RunConfig) -> tuple[Vocabulary, list[TokenSequence]]:
    src = cfg.corpus
    if src.synthetic is not None:
        return synthetic_vocabulary(src.synthetic.vocab_size), generate_synthetic_corpus(src.synthetic)
    lines = read_text_corpus(src.path)
    if not lines:
        raise DataError(f"corpus file {src.path} has no text")
    vocab = build_vocabulary(lines, src.vocab_size)
    return vocab, [tokenize(line, vocab, src.max_length) for line in lines]


def model_config(cfg: RunConfig, vocab: Vocabulary) -> EncoderConfig:
    if "vocab_size" in cfg.model_overrides and cfg.model.vocab_size != len(vocab):
        raise ConfigError(f"{cfg.source}: model.vocab_size {cfg.model.vocab_size} does not match the "
                          f"corpus vocabulary ({len(vocab)} tokens)")
    return cfg.model.replace(vocab_size=len(vocab))


def load_teacher(path: Path, vocab: Vocabulary, expected: EncoderConfig) -> EncoderModel:
    meta = checkpoint_meta(path)
    tokens = meta.get("vocabulary")
    if tokens is not None and tokens != vocab.tokens:
        raise ConfigError(f"teacher {path} was trained with a different vocabulary "
                          f"({len(tokens)} tokens vs {len(vocab)})")
    teacher = load_checkpoint(path)
    if teacher.config.vocab_size != expected.vocab_size:
        raise ConfigError(f"teacher vocabulary size {teacher.config.vocab_size} != "
                          f"run vocabulary size {expected.vocab_size}")
    return teacher


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def record_run(run_dir: Path, cfg: RunConfig, vocab: Vocabulary) -> None:
    shutil.copyfile(cfg.source, run_dir / "config.yaml")
    vocab.save(run_dir / "vocab.txt")
    resolved = dataclasses.asdict(cfg)
    resolved["model_overrides"] = sorted(cfg.model_overrides)  # set order is not stable across processes
    write_json(run_dir / "resolved_config.json", resolved)


# commands -----------------------------------------------------------------

def _train(args, teacher_mode: bool) -> int:
    cfg = resolve_config(args)
    plan = cfg.plan
    if teacher_mode and (plan.masking.strategy != "random" or plan.kd_mode != "off"):
        raise ConfigError(f"{cfg.source}: train-teacher expects plan.masking.strategy: random and no "
                          f"distillation (got {plan.masking.strategy}, kd_mode={plan.kd_mode})")
    teacher_path = None
    if not teacher_mode:
        teacher_path = Path(args.teacher) if args.teacher else cfg.teacher
        if plan.needs_teacher() and teacher_path is None:
            raise ConfigError(
                f"{cfg.source}: this plan needs a teacher (strategy={plan.masking.strategy}, "
                f"entropy_source={plan.masking.entropy_source}, self_start_epoch={plan.masking.self_start_epoch}, "
                f"kd_mode={plan.kd_mode}); pass --teacher or set 'teacher' in the config")
        if teacher_path is not None and not teacher_path.is_file():
            raise ConfigError(f"teacher checkpoint not found: {teacher_path}")
    vocab, corpus = load_corpus(cfg)
    mcfg = model_config(cfg, vocab)
    train, heldout = split_corpus(corpus, plan.heldout_fraction, cfg.corpus.split_seed)
    teacher = load_teacher(teacher_path, vocab, mcfg) if teacher_path is not None and plan.needs_teacher() else None
    run_dir = fresh_dir(output_root(args, cfg) / cfg.run_id, args.force)
    record_run(run_dir, cfg, vocab)
    meta = {"vocabulary": vocab.tokens}
    student = EncoderModel(mcfg, seed=cfg.seed)
    result = pretrain(plan, train, student, teacher, heldout, out_dir=run_dir, mask_trace=cfg.mask_trace,
                      run_id=cfg.run_id, checkpoint_meta=meta)
    final = save_checkpoint(student, run_dir / FINAL, meta={**meta, "run_id": cfg.run_id})
    loss = result.final_heldout_loss
    write_json(run_dir / "summary.json", {"run_id": cfg.run_id, "final_heldout_mlm_loss": loss,
                                          "epochs": [e.to_dict() for e in result.epochs]})
    print(f"final held-out MLM loss: {loss:.6f}")
    print(f"checkpoint: {final}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    return _train(args, teacher_mode=True)


def cmd_pretrain(args) -> int:
    return _train(args, teacher_mode=False)


def probe_tasks(cfg: RunConfig, vocab: Vocabulary, corpus: list[TokenSequence]) -> list[ProbeTask]:
    spec = cfg.probes
    rng = np.random.default_rng([spec.seed, 505])
    pick = rng.permutation(len(corpus))[: spec.num_examples]
    seqs = [corpus[i] for i in sorted(pick)]
    builders = {"chance": lambda: chance_task(seqs, seed=spec.seed), "presence": lambda: presence_task(seqs),
                "order": lambda: order_task(seqs), "copy": lambda: copy_label_task(seqs)}
    tasks = []
    for t in spec.tasks:
        if isinstance(t, ProbeFile):
            tasks.append(load_probe_file(t.path, vocab, t.name, cfg.corpus.max_length))
        else:
            tasks.append(builders[t]())
    return tasks


def _settings(cfg: RunConfig) -> FinetuneSettings:
    p = cfg.probes
    return FinetuneSettings(p.epochs, p.learning_rate, p.batch_size, p.patience)


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else output_root(args, cfg) / cfg.run_id
    ckpt = run_dir / FINAL
    if not ckpt.is_file():
        raise DataError(f"no final checkpoint in {run_dir} (expected {ckpt.name})")
    freeze = cfg.probes.freeze if args.freeze is None else args.freeze
    vocab, corpus = load_corpus(cfg)
    tasks = probe_tasks(cfg, vocab, corpus)
    model = load_checkpoint(ckpt)
    tokens = checkpoint_meta(ckpt).get("vocabulary")
    if tokens is not None and tokens != vocab.tokens:
        raise ConfigError(f"{ckpt} was trained with a different vocabulary than {cfg.source} describes")
    eval_dir = fresh_dir(run_dir / "eval", args.force)
    results = []
    for task in tasks:
        for seed in cfg.probes.seeds:
            res, initial, tuned = probe_models(model, task, freeze, seed, _settings(cfg))
            results.append(res)
            if args.save_probes:
                save_checkpoint(initial, eval_dir / f"probe-{task.name}-seed{seed}-initial.ckpt")
                save_checkpoint(tuned, eval_dir / f"probe-{task.name}-seed{seed}-final.ckpt")
    report = ProbeReport(results)
    write_json(eval_dir / "probes.json", {"freeze": freeze, **report.to_dict()})
    for t in report.tasks:
        print(f"{t:<12} {100 * report.task_mean(t):6.2f}")
    print(f"{'Total':<12} {100 * report.total():6.2f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    if cfg.compare is None:
        raise ConfigError(f"{cfg.source}: compare needs a 'compare' section listing the plans")
    vocab, corpus = load_corpus(cfg)
    mcfg = model_config(cfg, vocab)
    variants = [Variant(name, plan, mcfg) for name, plan in cfg.compare.plans]
    check_comparable(variants)
    teacher_path = Path(args.teacher) if args.teacher else cfg.teacher
    needs = [v.name for v in variants if v.plan.needs_teacher()]
    if needs and teacher_path is None:
        raise ConfigError(f"{cfg.source}: plans {needs} need a teacher; pass --teacher or set 'teacher'")
    if teacher_path is not None and not teacher_path.is_file():
        raise ConfigError(f"teacher checkpoint not found: {teacher_path}")
    train, heldout = split_corpus(corpus, cfg.plan.heldout_fraction, cfg.corpus.split_seed)
    tasks = probe_tasks(cfg, vocab, corpus)
    teacher = load_teacher(teacher_path, vocab, mcfg) if needs else None
    run_dir = fresh_dir(output_root(args, cfg) / cfg.run_id, args.force)
    record_run(run_dir, cfg, vocab)
    table = strategy_experiment(variants, train, tasks, teacher, cfg.compare.seeds, cfg.probes.freeze,
                                _settings(cfg), heldout, out_dir=run_dir)
    sys.stdout.write(table.render())
    return EXIT_OK


def cmd_divergence(args) -> int:
    pre, ft = Path(args.pretrained), Path(args.finetuned)
    for p in (pre, ft):
        if not p.is_file():
            raise DataError(f"checkpoint not found: {p}")
    report_path = Path(args.report) if args.report else ft.parent / f"{ft.stem}-divergence.json"
    if report_path.exists() and not args.force:
        raise ConfigError(f"{report_path} already exists; pass --force to replace it")
    report = weight_divergence(load_checkpoint(pre), load_checkpoint(ft), task=args.task or "")
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.write(report_path)
    for name, value in report.by_component.items():
        print(f"{name:<12} {value:10.4f}%")
    print(f"report: {report_path}")
    return EXIT_OK


# argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help=f"output root (default: config output_dir, ${OUT_ENV}, or ./runs)")
    common.add_argument("--force", action="store_true", help="replace an existing run directory")
    common.add_argument("--mask-trace", action="store_true", help="write mask_trace.jsonl")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="entmask", description="Entropy-guided masking for MLM pretraining.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_, config=True):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--config", required=config, help="run configuration (YAML)")
        p.set_defaults(fn=fn)
        return p

    command("train-teacher", cmd_train_teacher, "pretrain a reference model with random masking")
    p = command("pretrain", cmd_pretrain, "pretrain with the configured masking strategy")
    p.add_argument("--teacher", help="teacher checkpoint (overrides the config)")
    p = command("evaluate", cmd_evaluate, "fine-tune probe classifiers on a run's final checkpoint")
    p.add_argument("--run-dir", help="run directory (default: <out>/<run_id>)")
    p.add_argument("--freeze", dest="freeze", action="store_true", default=None, help="train only the head")
    p.add_argument("--no-freeze", dest="freeze", action="store_false", help="fine-tune the whole model")
    p.add_argument("--save-probes", action="store_true", help="keep probe checkpoints before/after fine-tuning")
    p = command("compare", cmd_compare, "run a strategy comparison grid")
    p.add_argument("--teacher", help="teacher checkpoint (overrides the config)")
    p = command("divergence", cmd_divergence, "relative weight change between two checkpoints", config=False)
    p.add_argument("pretrained")
    p.add_argument("finetuned")
    p.add_argument("--report", help="output JSON path")
    p.add_argument("--task", help="task name recorded in the report")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.record is not None:
            print(json.dumps(exc.record.to_dict(), sort_keys=True), file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EntmaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
