import json
import textwrap

import pytest

from entmask.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, OUT_ENV, main
from entmask.model import load_checkpoint

BASE = """\
run_id: {run_id}
corpus:
  synthetic:
    vocab_size: 16
    num_sequences: 80
    min_length: 4
    max_length: 10
model:
  preset: tiny
  max_position: 16
plan:
  epochs: 2
  learning_rate: 3e-3
  batch_size: 16
  masking:
    strategy: {strategy}
{extra}
probes:
  tasks: [presence, order]
  seeds: [0, 1]
  num_examples: 60
"""


def write(tmp_path, name, run_id=None, strategy="random", extra=""):
    p = tmp_path / f"{name}.yaml"
    p.write_text(BASE.format(run_id=run_id or name, strategy=strategy, extra=textwrap.indent(extra, "    ")),
                 encoding="utf-8")
    return p


@pytest.fixture
def teacher(tmp_path):
    cfg = write(tmp_path, "teacher")
    assert main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / "runs")]) == 0
    return tmp_path / "runs" / "teacher" / "final.ckpt"


def run(*argv):
    return main([str(a) for a in argv])


class TestTrainTeacher:
    def test_checkpoint_written_and_loadable(self, tmp_path, teacher, capsys):
        model = load_checkpoint(teacher)
        assert model.config.vocab_size == 21
        run_dir = teacher.parent
        for f in ("teacher-epoch000.ckpt", "teacher-epoch001.ckpt", "metrics.jsonl", "vocab.txt",
                  "summary.json", "config.yaml"):
            assert (run_dir / f).is_file()

    def test_prints_heldout_loss(self, tmp_path, capsys):
        run("train-teacher", "--config", write(tmp_path, "t"), "--out", tmp_path / "runs")
        assert "final held-out MLM loss" in capsys.readouterr().out

    def test_missing_corpus_path_fails_before_compute(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("run_id: x\ncorpus:\n  path: nowhere.txt\n", encoding="utf-8")
        assert run("train-teacher", "--config", cfg, "--out", tmp_path / "runs") == EXIT_CONFIG
        assert "c.yaml:3" in capsys.readouterr().err
        assert not (tmp_path / "runs").exists()

    def test_rejects_non_random_strategy(self, tmp_path):
        cfg = write(tmp_path, "t", strategy="high")
        assert run("train-teacher", "--config", cfg, "--out", tmp_path / "runs") == EXIT_CONFIG

    def test_rerun_bit_identical(self, tmp_path):
        cfg = write(tmp_path, "t")
        for root in ("a", "b"):
            assert run("train-teacher", "--config", cfg, "--out", tmp_path / root) == 0
        files = sorted(p.name for p in (tmp_path / "a" / "t").iterdir())
        for name in files:
            assert (tmp_path / "a" / "t" / name).read_bytes() == (tmp_path / "b" / "t" / name).read_bytes(), name

    def test_append_only_unless_forced(self, tmp_path):
        cfg = write(tmp_path, "t")
        out = tmp_path / "runs"
        assert run("train-teacher", "--config", cfg, "--out", out) == 0
        assert run("train-teacher", "--config", cfg, "--out", out) == EXIT_CONFIG
        assert run("train-teacher", "--config", cfg, "--out", out, "--force") == 0

    def test_env_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUT_ENV, str(tmp_path / "envroot"))
        assert run("train-teacher", "--config", write(tmp_path, "t")) == 0
        assert (tmp_path / "envroot" / "t" / "final.ckpt").is_file()

    def test_seed_flag_changes_run(self, tmp_path):
        cfg = write(tmp_path, "t")
        run("train-teacher", "--config", cfg, "--out", tmp_path / "a")
        run("train-teacher", "--config", cfg, "--out", tmp_path / "b", "--seed", "7")
        a = (tmp_path / "a" / "t" / "final.ckpt").read_bytes()
        assert a != (tmp_path / "b" / "t" / "final.ckpt").read_bytes()

    def test_divergence_exit_code(self, tmp_path, capsys):
        cfg = write(tmp_path, "boom")
        cfg.write_text(cfg.read_text().replace("3e-3", "1e30"), encoding="utf-8")
        with pytest.warns(RuntimeWarning):
            assert run("train-teacher", "--config", cfg, "--out", tmp_path / "runs") == EXIT_DIVERGED
        assert '"total_loss": NaN' in capsys.readouterr().err


class TestPretrain:
    def test_high_with_teacher_writes_trace(self, tmp_path, teacher):
        cfg = write(tmp_path, "high", strategy="high")
        assert run("pretrain", "--config", cfg, "--teacher", teacher, "--out", tmp_path / "runs", "--mask-trace") == 0
        lines = (tmp_path / "runs" / "high" / "mask_trace.jsonl").read_text().splitlines()
        assert lines and all(json.loads(line)["positions"] for line in lines)

    def test_teacher_from_config(self, tmp_path, teacher):
        cfg = write(tmp_path, "high", strategy="high")
        cfg.write_text(cfg.read_text() + f"teacher: {teacher}\n", encoding="utf-8")
        assert run("pretrain", "--config", cfg, "--out", tmp_path / "runs") == 0

    def test_self_without_teacher_names_it(self, tmp_path, capsys):
        cfg = write(tmp_path, "s", strategy="high", extra="entropy_source: self\nself_start_epoch: 1")
        assert run("pretrain", "--config", cfg, "--out", tmp_path / "runs") == EXIT_CONFIG
        assert "teacher" in capsys.readouterr().err
        assert not (tmp_path / "runs").exists()

    def test_cold_start_without_teacher(self, tmp_path):
        cfg = write(tmp_path, "s", strategy="high", extra="entropy_source: self\nself_start_epoch: 0")
        assert run("pretrain", "--config", cfg, "--out", tmp_path / "runs") == 0

    def test_kd_off_literal(self, tmp_path):
        cfg = write(tmp_path, "r")
        cfg.write_text(cfg.read_text().replace("  batch_size: 16", "  batch_size: 16\n  kd_mode: off"),
                       encoding="utf-8")
        assert run("pretrain", "--config", cfg, "--out", tmp_path / "runs") == 0

    def test_teacher_vocabulary_mismatch(self, tmp_path, teacher, capsys):
        cfg = write(tmp_path, "h", strategy="high")
        cfg.write_text(cfg.read_text().replace("vocab_size: 16", "vocab_size: 20"), encoding="utf-8")
        assert run("pretrain", "--config", cfg, "--teacher", teacher, "--out", tmp_path / "runs") == EXIT_CONFIG
        assert "vocabulary" in capsys.readouterr().err

    def test_unknown_key_reports_line(self, tmp_path, capsys):
        cfg = write(tmp_path, "r")
        cfg.write_text(cfg.read_text().replace("learning_rate", "lerning_rate"), encoding="utf-8")
        assert run("pretrain", "--config", cfg) == EXIT_CONFIG
        assert "r.yaml:13" in capsys.readouterr().err


class TestEvaluateCompareDivergence:
    def test_evaluate(self, tmp_path, teacher, capsys):
        cfg = write(tmp_path, "teacher")
        assert run("evaluate", "--config", cfg, "--out", tmp_path / "runs", "--save-probes") == 0
        report = json.loads((teacher.parent / "eval" / "probes.json").read_text())
        assert set(report["tasks"]) == {"presence", "order"}
        assert report["freeze"] is True
        assert "Total" in capsys.readouterr().out
        pre = teacher.parent / "eval" / "probe-order-seed1-initial.ckpt"
        ft = teacher.parent / "eval" / "probe-order-seed1-final.ckpt"
        assert run("divergence", pre, ft, "--report", tmp_path / "d.json", "--task", "order") == 0
        d = json.loads((tmp_path / "d.json").read_text())
        assert d["by_component"]["head"] > 0
        assert all(v == 0 for n, v in d["parameters"].items() if not n.startswith("classifier."))

    def test_evaluate_missing_checkpoint(self, tmp_path):
        cfg = write(tmp_path, "none")
        assert run("evaluate", "--config", cfg, "--run-dir", tmp_path / "empty") == EXIT_DATA

    def test_compare(self, tmp_path, teacher):
        cfg = write(tmp_path, "cmp")
        cfg.write_text(cfg.read_text() + textwrap.dedent(f"""\
            teacher: {teacher}
            compare:
              seeds: [0, 1]
              plans:
                - name: baseline
                  masking: {{strategy: random}}
                - name: max
                  masking: {{strategy: high}}
            """), encoding="utf-8")
        assert run("compare", "--config", cfg, "--out", tmp_path / "runs") == 0
        table = json.loads((tmp_path / "runs" / "cmp" / "comparison.json").read_text())
        assert [r["name"] for r in table["rows"]] == ["baseline", "max"]
        assert (tmp_path / "runs" / "cmp" / "comparison.txt").read_text().startswith("plan")

    def test_compare_needs_two_plans(self, tmp_path):
        cfg = write(tmp_path, "cmp")
        cfg.write_text(cfg.read_text() + "compare:\n  plans:\n    - name: only\n", encoding="utf-8")
        assert run("compare", "--config", cfg, "--out", tmp_path / "runs") == EXIT_CONFIG

    def test_divergence_preset_mismatch(self, tmp_path, teacher):
        cfg = write(tmp_path, "wide")
        cfg.write_text(cfg.read_text().replace("preset: tiny", "preset: tiny\n  hidden_dim: 16"), encoding="utf-8")
        run("train-teacher", "--config", cfg, "--out", tmp_path / "runs")
        other = tmp_path / "runs" / "wide" / "final.ckpt"
        assert run("divergence", teacher, other, "--report", tmp_path / "d.json") == EXIT_CONFIG

    def test_divergence_missing_checkpoint(self, tmp_path, teacher):
        assert run("divergence", teacher, tmp_path / "nope.ckpt") == EXIT_DATA
