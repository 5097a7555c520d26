"""Acceptance criteria 1-10.

Each test carries ``@pytest.mark.criterion(n)``; the conftest prints one
PASS/FAIL line per criterion at the end of the run. Run on its own with
``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import math
import sys
import time
import zlib
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from entmask import ops
from entmask.analysis import weight_divergence
from entmask.cli import main as cli_main
from entmask.data import (
    CLS_ID,
    MASK_ID,
    SEP_ID,
    UNK_ID,
    SyntheticCorpusSpec,
    TokenSequence,
    collate,
    generate_synthetic_corpus,
    make_batches,
    split_corpus,
    synthetic_vocabulary,
)
from entmask.masking import (
    EntropyVector,
    MaskingConfig,
    apply_mask,
    batch_entropies,
    entropy_source_for_epoch,
    mask_batch,
    mask_budget,
    select_mask,
    token_entropies,
)
from entmask.model import EncoderModel, preset
from entmask.tensor import Tape, Tensor, backward
from entmask.training import TrainPlan, Trainer, finetune_frozen, mlm_loss, pretrain, substream

from helpers import TINY, brute_force_select, check_grad, corpus, entropy_oracle
from test_tensor import GRAD_CASES

criterion = pytest.mark.criterion


class FixedLogits:
    """Scorer stub returning preset logits, so token_entropies can be fed arbitrary vectors."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float32)
        self.config = SimpleNamespace(vocab_size=self.logits.shape[-1])

    def forward_mlm(self, batch, train=False):
        return Tensor(self.logits[None])


def entropies_via_pipeline(logits):
    """Feed logits rows as content positions of one framed sequence; return the content entropies."""
    v = logits.shape[1]
    framed = np.vstack([np.zeros((1, v)), logits, np.zeros((1, v))])
    seq = TokenSequence([CLS_ID] + [UNK_ID] * logits.shape[0] + [SEP_ID])
    return token_entropies(FixedLogits(framed), seq).values[1:-1]


@criterion(1)
def test_entropy_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    vocab_sizes = rng.integers(4, 65, size=1000)
    for v in np.unique(vocab_sizes):
        n = int((vocab_sizes == v).sum())
        logits = (rng.standard_normal((n, v)) * rng.uniform(0.1, 5.0, (n, 1))).astype(np.float32)
        got = entropies_via_pipeline(logits)
        want = np.array([entropy_oracle(row) for row in logits.astype(np.float64)])
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst < 1e-5
    for v in range(4, 65):
        uniform = entropies_via_pipeline(np.full((3, v), 0.7))
        assert np.all(np.abs(uniform - math.log(v)) < 1e-6)
        one_hot = np.full((1, v), -1e4)
        one_hot[0, v // 2] = 0.0
        assert entropies_via_pipeline(one_hot)[0] < 1e-6
    assert time.perf_counter() - start < 10


@criterion(2)
def test_selection_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    strategies = ("high", "low", "mid", "marginal", "alternating")
    done = 0
    while done < 10_000:
        n = int(rng.integers(1, 11))
        # small value alphabet so ties are common; occasional continuous values
        vals = (rng.integers(0, 4, n) if rng.random() < 0.7 else rng.random(n)).astype(float)
        maskable = rng.random(n) < 0.85
        m = int(maskable.sum())
        if m == 0:
            continue
        k = int(rng.integers(1, m + 1))
        strategy = strategies[done % len(strategies)]
        if strategy == "alternating":
            side = bool(rng.random() < 0.5)
            got = select_mask(EntropyVector(vals, maskable), k, strategy, high_side=side).positions
            want = brute_force_select(vals, maskable, k, "high" if side else "low")
        else:
            got = select_mask(EntropyVector(vals, maskable), k, strategy).positions
            want = brute_force_select(vals, maskable, k, strategy)
        assert got == want, (vals.tolist(), maskable.tolist(), k, strategy)
        done += 1
    assert time.perf_counter() - start < 30


@criterion(3)
def test_gradient_correctness():
    for name, (build, shapes) in sorted(GRAD_CASES.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(20):
            arrays = [rng.standard_normal(s) for s in shapes]
            if name == "relu":
                arrays[0][np.abs(arrays[0]) < 0.05] = 0.5
            assert check_grad(build, arrays) < 1e-2, name
    rng = np.random.default_rng(3)
    ids = np.array([[0, 3, 3], [1, 0, 2]])
    for i in range(20):
        w = rng.standard_normal((5, 4))
        c = rng.standard_normal((2, 3, 4))
        assert check_grad(lambda w: ops.sum(ops.mul(ops.embedding(w, ids), c)), [w]) < 1e-2
        x = rng.standard_normal((4, 5))
        assert check_grad(lambda x, i=i: ops.sum(ops.mul(ops.dropout(x, 0.3, np.random.default_rng(i)), x)),
                          [x]) < 1e-2
        q = rng.dirichlet(np.ones(6), size=3)
        x = rng.standard_normal((3, 6))
        assert check_grad(lambda x: ops.cross_entropy(x, [1, 5, 0]), [x]) < 1e-2
        assert check_grad(lambda x: ops.soft_cross_entropy(x, q), [x]) < 1e-2
    for _ in range(20):
        logits = rng.standard_normal((2, 5, 7))
        targets = rng.integers(0, 7, (2, 5))
        mask = rng.random((2, 5)) < 0.4
        mask[1, 2] = True
        assert check_grad(lambda x: mlm_loss(x, targets, mask), [logits]) < 1e-2
        x = Tensor(logits, requires_grad=True, dtype=np.float64)
        with Tape():
            loss = mlm_loss(x, targets, mask)
        backward(loss)
        assert np.all(x.grad[~mask] == 0.0)


@criterion(4)
def test_mask_budget_and_legality():
    rng = np.random.default_rng(4)
    strategies = ("random", "high", "low", "mid", "marginal", "alternating")
    for trial in range(30):
        spec = SyntheticCorpusSpec(vocab_size=int(rng.integers(8, 40)), num_sequences=40,
                                   min_length=int(rng.integers(1, 5)), max_length=int(rng.integers(5, 30)),
                                   predictability=float(rng.random()), seed=trial)
        seqs = generate_synthetic_corpus(spec)
        ratio = float(rng.choice([0.05, 0.15, 0.4, 0.9]))
        cfg = MaskingConfig(strategies[trial % 6], mask_ratio=ratio, single_token=trial % 7 == 0)
        coin = np.random.default_rng(trial)
        for batch in make_batches(seqs, 7, shuffle_seed=trial):
            ent = np.where(batch.maskable(), rng.random(batch.ids.shape), np.nan)
            bm = mask_batch(batch, cfg, coin, ent if cfg.uses_entropy else None)
            for row, ms in enumerate(bm.masks):
                seq = batch.sequence(row)
                legal = seq.maskable()
                m = int(legal.sum())
                assert len(ms) == mask_budget(m, ratio, cfg.single_token)
                assert all(legal[p] for p in ms.positions)
                masked = apply_mask(seq, ms)
                for j in range(len(seq)):
                    expected = MASK_ID if j in ms.positions else seq.ids[j]
                    assert masked.ids[j] == expected
                n = len(seq)
                assert np.array_equal(bm.input_ids[row, :n], masked.ids)


@criterion(5)
def test_schedule_correctness(pretrained):
    data = corpus(40, seed=5)
    static = Trainer(TrainPlan(MaskingConfig("high"), epochs=4, batch_size=6), data, EncoderModel(TINY),
                     pretrained)
    first = static.masks_for_epoch(0)
    for epoch in range(4):
        assert static.masks_for_epoch(epoch) == first
        static.run_epoch(epoch)  # the student changes; teacher masks must not
        assert static.masks_for_epoch(epoch) == first

    plan = TrainPlan(MaskingConfig("high", entropy_source="self", self_start_epoch=2), epochs=4, batch_size=8)
    student = EncoderModel(TINY, seed=8)
    tr = Trainer(plan, data, student, pretrained)
    batch = collate(data[:8], np.arange(8))
    for epoch in range(4):
        chosen = entropy_source_for_epoch(plan.masking, epoch, student, pretrained)
        assert chosen is (pretrained if epoch < 2 else student)
        expected = batch_entropies(chosen, batch)
        np.testing.assert_array_equal(tr._entropies(epoch, batch), expected)
        tr.run_epoch(epoch)
    tags = [r.entropy_source for r in tr.records]
    epochs = [r.epoch for r in tr.records]
    assert all(t == ("teacher" if e < 2 else "self") for t, e in zip(tags, epochs))

    cfg = MaskingConfig("alternating")
    small = collate(data[:2])
    ent = np.where(small.maskable(), 0.5, np.nan)
    high = 0
    for epoch in range(100):
        coin = substream(cfg.strategy_seed, 3, 0, epoch)
        for _ in range(100):
            high += mask_batch(small, cfg, coin, ent).side == "high"
    assert 0.48 <= high / 10_000 <= 0.52


# desk-scale runs shared by criteria 6 and 7

DESK_SPEC = SyntheticCorpusSpec(vocab_size=32, num_sequences=2000, min_length=12, max_length=24,
                                predictability=0.5, seed=0)
DESK_LR = 1e-3


@pytest.fixture(scope="module")
def desk():
    vocab = synthetic_vocabulary(DESK_SPEC.vocab_size)
    train, heldout = split_corpus(generate_synthetic_corpus(DESK_SPEC), 0.05, seed=0)
    cfg = preset("desk", vocab_size=len(vocab), max_position=32)
    start = time.perf_counter()
    baseline = EncoderModel(cfg, seed=100)
    result = pretrain(TrainPlan(MaskingConfig("random"), epochs=10, learning_rate=DESK_LR), train, baseline,
                      heldout=heldout)
    return {"train": train, "heldout": heldout, "config": cfg, "baseline": baseline, "result": result,
            "seconds": time.perf_counter() - start}


@criterion(6)
def test_end_to_end_desk_training(desk):
    cfg = desk["config"]
    assert (cfg.num_layers, cfg.hidden_dim) == (2, 64)
    losses = [e.heldout_mlm_loss for e in desk["result"].epochs]
    print("held-out MLM loss per epoch:", [round(x, 4) for x in losses], f"({desk['seconds']:.0f}s)")
    assert len(losses) == 10
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert desk["seconds"] < 15 * 60


@criterion(7)
def test_directional_high_vs_mid(desk):
    rows = []
    for seed in range(5):
        out = {}
        for strategy in ("high", "mid"):
            student = EncoderModel(desk["config"], seed=seed)
            plan = TrainPlan(MaskingConfig(strategy), epochs=10, learning_rate=DESK_LR, run_seed=seed)
            out[strategy] = pretrain(plan, desk["train"], student, desk["baseline"],
                                     heldout=desk["heldout"]).final_heldout_loss
        rows.append(out)
    print("held-out MLM loss by seed:", [{k: round(v, 4) for k, v in r.items()} for r in rows])
    wins = sum(r["high"] <= r["mid"] for r in rows)
    assert wins >= 4, f"high <= mid in {wins}/5 seeds: {rows}"


@criterion(8)
def test_kd_contracts(pretrained):
    before = {n: t.data.tobytes() for n, t in pretrained.params.items()}
    data = corpus(32, seed=8)
    masking = MaskingConfig("high", entropy_source="self", self_start_epoch=1)
    for mode in ("complete_transfer", "transfer_after_init"):
        r = pretrain(TrainPlan(masking, epochs=3, batch_size=8, kd_mode=mode, kd_weight=0.5), data,
                     EncoderModel(TINY, seed=1), pretrained)
        kd_records = [rec for rec in r.records if rec.kd_loss is not None]
        assert kd_records
        for rec in kd_records:
            assert abs(rec.total_loss - (0.5 * rec.mlm_loss + 0.5 * rec.kd_loss)) < 1e-7
    assert {n: t.data.tobytes() for n, t in pretrained.params.items()} == before

    base = dict(epochs=3, batch_size=8, learning_rate=2e-3, run_seed=6)
    complete = Trainer(TrainPlan(masking, kd_mode="complete_transfer", **base), data, EncoderModel(TINY, seed=2),
                       pretrained)
    complete.run_epoch(0)
    after = Trainer(TrainPlan(masking, kd_mode="transfer_after_init", **base), data, EncoderModel(TINY, seed=3),
                    pretrained)
    after.inject_state(complete.student, complete.optimizer.state_dict())
    for epoch in (1, 2):
        complete.run_epoch(epoch)
        after.run_epoch(epoch)
    assert [r.to_dict() for r in complete.records if r.epoch >= 1] == [r.to_dict() for r in after.records]
    assert all(complete.student.params[n].data.tobytes() == after.student.params[n].data.tobytes()
               for n in complete.student.params)


@criterion(9)
def test_frozen_finetune_contract(pretrained):
    pre = pretrained.copy()
    pre.attach_classifier(2, seed=4)
    seqs = corpus(200, seed=12)
    labels = [int(s.ids[1] % 2) for s in seqs]
    train, dev = list(zip(seqs[:150], labels[:150])), list(zip(seqs[150:], labels[150:]))
    tuned = pre.copy()
    finetune_frozen(tuned, train, dev, epochs=1, learning_rate=1e-2, batch_size=16)
    body = pre.body_parameter_names()
    assert max(float(np.abs(tuned.params[n].data - pre.params[n].data).max()) for n in body) == 0.0
    report = weight_divergence(pre, tuned)
    assert all(report.parameters[n] == 0.0 for n in body)
    assert all(report.parameters[n] > 0.0 for n in pre.head_parameter_names())


REPRO_CONFIG = """\
run_id: {run_id}
corpus:
  synthetic:
    vocab_size: 16
    num_sequences: 60
    min_length: 4
    max_length: 10
model:
  preset: tiny
  max_position: 16
plan:
  epochs: 2
  learning_rate: 3e-3
  batch_size: 16
  kd_mode: {kd}
  masking:
    strategy: {strategy}
    entropy_source: self
    self_start_epoch: 1
probes:
  tasks: [presence, order]
  seeds: [0, 1]
  num_examples: 50
"""


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@criterion(10)
def test_command_reruns_are_bit_identical(tmp_path):
    configs = {
        "teacher": REPRO_CONFIG.format(run_id="teacher", strategy="random", kd="off"),
        "student": REPRO_CONFIG.format(run_id="student", strategy="alternating", kd="transfer_after_init"),
        "grid": REPRO_CONFIG.format(run_id="grid", strategy="random", kd="off")
                + "compare:\n  seeds: [0, 1]\n  plans:\n    - name: base\n"
                  "    - name: alt\n      masking: {strategy: alternating, entropy_source: teacher}\n",
    }
    paths = {}
    for name, text in configs.items():
        paths[name] = tmp_path / f"{name}.yaml"
        paths[name].write_text(text, encoding="utf-8")
    for root in ("a", "b"):
        out = tmp_path / root
        teacher = out / "teacher" / "final.ckpt"
        steps = [
            ["train-teacher", "--config", paths["teacher"], "--out", out],
            ["pretrain", "--config", paths["student"], "--out", out, "--teacher", teacher, "--mask-trace"],
            ["evaluate", "--config", paths["student"], "--out", out, "--save-probes"],
            ["compare", "--config", paths["grid"], "--out", out, "--teacher", teacher],
            ["divergence", out / "student" / "eval" / "probe-order-seed0-initial.ckpt",
             out / "student" / "eval" / "probe-order-seed0-final.ckpt", "--report", out / "divergence.json"],
        ]
        for argv in steps:
            assert cli_main([str(a) for a in argv]) == 0, argv
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert sorted(a) == sorted(b)
    assert any(k.endswith(".ckpt") for k in a) and any(k.endswith("metrics.jsonl") for k in a)
    differing = [k for k in a if a[k] != b[k]]
    assert not differing, differing


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
