import json
from pathlib import Path

import numpy as np
import pytest

from sparseprune.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from sparseprune.compress import count_flops
from sparseprune.data import load_checkpoint
from sparseprune.nn import model_forward


SYNTH_CFG = {
    "dataset": "synth",
    "synth": {"samples": 600, "informative": 2, "noise": 2, "classes": 3, "image_size": 8},
    "epochs": 3,
    "finetune_epochs": 1,
    "batch_size": 32,
    "lr": 0.1,
}


@pytest.fixture()
def cfg_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SYNTH_CFG))
    return path


def run_cli(*argv):
    return main([str(a) for a in argv])


def read_json_line(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


class TestTrainBaseline:
    def test_trains_and_writes_artifacts(self, tmp_path, cfg_file, capsys):
        out = tmp_path / "run"
        code = run_cli("train-baseline", "--config", cfg_file, "--out", out, "--format", "json-lines")
        assert code == EXIT_OK
        metrics = read_json_line(capsys)
        assert metrics["test_accuracy"] > 0.5
        assert (out / "baseline.ckpt").exists()
        assert (out / "metrics.json").exists()
        assert (out / "train_log.jsonl").exists()
        saved_cfg = json.loads((out / "config.json").read_text())
        assert saved_cfg["seed"] == 0 and saved_cfg["dataset"] == "synth"
        log_lines = (out / "train_log.jsonl").read_text().strip().splitlines()
        assert len(log_lines) == SYNTH_CFG["epochs"]
        assert {"epoch", "F", "f", "l1", "sparsity", "val_accuracy"} <= set(json.loads(log_lines[0]))

    def test_missing_dataset_path_exits_2_naming_field(self, tmp_path, capsys):
        code = run_cli("train-baseline", "--dataset", "mnist", "--out", tmp_path / "x")
        assert code == EXIT_CONFIG
        assert "data_dir" in capsys.readouterr().err

    def test_fixed_seed_reproduces_metrics(self, tmp_path, cfg_file, capsys):
        metrics = []
        for name in ("a", "b"):
            code = run_cli("train-baseline", "--config", cfg_file, "--seed", 7,
                           "--out", tmp_path / name, "--format", "json-lines")
            assert code == EXIT_OK
            metrics.append(read_json_line(capsys))
        assert metrics[0] == metrics[1]

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"dataset": "synth", "typo_field": 1}))
        code = run_cli("train-baseline", "--config", bad, "--out", tmp_path / "x")
        assert code == EXIT_CONFIG
        assert "typo_field" in capsys.readouterr().err

    def test_divergence_exits_3(self, tmp_path, cfg_file, capsys):
        code = run_cli("train-baseline", "--config", cfg_file, "--lr", 1e6,
                       "--out", tmp_path / "x", "--epochs", 3)
        assert code == EXIT_NUMERIC
        assert "diverged" in capsys.readouterr().err


@pytest.fixture()
def baseline_run(tmp_path, cfg_file):
    out = tmp_path / "baseline"
    assert run_cli("train-baseline", "--config", cfg_file, "--out", out) == EXIT_OK
    return out


class TestCompress:
    def test_requires_baseline_or_from_scratch(self, tmp_path, cfg_file, capsys):
        code = run_cli("compress", "--config", cfg_file, "--out", tmp_path / "c")
        assert code == EXIT_CONFIG
        assert "baseline" in capsys.readouterr().err

    def test_single_round_report(self, tmp_path, cfg_file, baseline_run, capsys):
        out = tmp_path / "compressed"
        code = run_cli(
            "compress", "--config", cfg_file, "--baseline", baseline_run / "baseline.ckpt",
            "--rounds", 1, "--lambda0", 2e-4, "--out", out, "--format", "json-lines",
        )
        assert code == EXIT_OK
        summary = read_json_line(capsys)
        report = json.loads((out / "report.json").read_text())
        assert len(report["rounds"]) == 1
        assert (out / "pruned.ckpt").exists()
        assert (out / "history.csv").exists()
        assert summary["flops_speedup"] >= 1.0
        # pruned checkpoint runs
        ckpt = load_checkpoint(out / "pruned.ckpt")
        batch = np.zeros((1, 4, 8, 8), dtype=np.float32)
        model_forward(ckpt.arch, ckpt.params, batch)

    def test_epsilon_one_reports_unit_ratios(self, tmp_path, cfg_file, baseline_run, capsys):
        out = tmp_path / "noop"
        code = run_cli(
            "compress", "--config", cfg_file, "--baseline", baseline_run / "baseline.ckpt",
            "--epsilon", 1.0, "--out", out, "--format", "json-lines",
        )
        assert code == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["metrics"]["compression_ratio"] == 1.0
        assert report["metrics"]["flops_speedup"] == 1.0

    def test_lambda_grid_records_selection(self, tmp_path, cfg_file, baseline_run):
        out = tmp_path / "grid"
        code = run_cli(
            "compress", "--config", cfg_file, "--baseline", baseline_run / "baseline.ckpt",
            "--lambda-grid", "--epochs", 1, "--finetune-epochs", 0, "--out", out,
        )
        assert code == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["lambda0"] in (1e-2, 1e-3, 1e-4, 1e-5)
        assert report["lambda_trials"] is not None
        assert str(report["lambda0"]) in {str(k) for k in report["lambda_trials"]}


class TestEvaluate:
    def test_reproduces_recorded_accuracy_exactly(self, tmp_path, cfg_file, baseline_run, capsys):
        metrics = json.loads((baseline_run / "metrics.json").read_text())
        code = run_cli("evaluate", baseline_run / "baseline.ckpt", "--config", cfg_file,
                       "--format", "json-lines")
        assert code == EXIT_OK
        out = read_json_line(capsys)
        assert out["test_accuracy"] == metrics["test_accuracy"]

    def test_flops_matches_count_flops(self, cfg_file, baseline_run, capsys):
        code = run_cli("evaluate", baseline_run / "baseline.ckpt", "--config", cfg_file,
                       "--format", "json-lines")
        assert code == EXIT_OK
        out = read_json_line(capsys)
        ckpt = load_checkpoint(baseline_run / "baseline.ckpt")
        assert out["flops"] == count_flops(ckpt.arch)

    def test_accuracy_matches_per_sample_argmax_loop(self, cfg_file, baseline_run, capsys):
        from sparseprune.cli import load_config_file, ExperimentConfig, load_dataset

        code = run_cli("evaluate", baseline_run / "baseline.ckpt", "--config", cfg_file,
                       "--format", "json-lines")
        assert code == EXIT_OK
        got = read_json_line(capsys)["test_accuracy"]
        cfg = ExperimentConfig(**load_config_file(cfg_file)).validate()
        ds = load_dataset(cfg)
        ckpt = load_checkpoint(baseline_run / "baseline.ckpt")
        hits = 0
        for i in range(len(ds.test)):
            logits = model_forward(ckpt.arch, ckpt.params, ds.test.images[i : i + 1])[0]
            hits += int(np.argmax(logits) == ds.test.labels[i])
        assert got == pytest.approx(hits / len(ds.test), abs=1e-12)

    def test_bad_checkpoint_path_exits_2(self, cfg_file, capsys):
        assert run_cli("evaluate", "/nonexistent.ckpt", "--config", cfg_file) == EXIT_CONFIG


class TestReport:
    @pytest.fixture()
    def compressed_run(self, tmp_path, cfg_file, baseline_run):
        out = tmp_path / "compressed"
        assert run_cli(
            "compress", "--config", cfg_file, "--baseline", baseline_run / "baseline.ckpt",
            "--lambda0", 2e-4, "--out", out,
        ) == EXIT_OK
        return out

    def test_summary_row_joins_widths_with_dashes(self, compressed_run, capsys):
        code = run_cli("report", compressed_run / "report.json", "--format", "json-lines")
        assert code == EXIT_OK
        lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        summary = lines[-1]
        report = json.loads((compressed_run / "report.json").read_text())
        assert summary["architecture"] == "-".join(str(w) for w in report["pruned"]["widths"])

    def test_csv_round_count(self, compressed_run, capsys):
        code = run_cli("report", compressed_run / "report.json", "--format", "csv")
        assert code == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        report = json.loads((compressed_run / "report.json").read_text())
        # header + rounds + summary header + summary row
        assert len(lines) == 1 + len(report["rounds"]) + 2

    def test_self_consistency_check(self, compressed_run, capsys):
        path = compressed_run / "report.json"
        payload = json.loads(path.read_text())
        recomputed = payload["metrics"]["compression_ratio"]
        assert run_cli("report", path) == EXIT_OK
        payload["metrics"]["compression_ratio"] = recomputed + 0.5
        path.write_text(json.dumps(payload))
        assert run_cli("report", path) == EXIT_CONFIG
        assert "self-consistency" in capsys.readouterr().err

    def test_schema_mismatch_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "report.json"
        bad.write_text(json.dumps({"metrics": {}}))
        assert run_cli("report", bad) == EXIT_CONFIG
        assert "schema" in capsys.readouterr().err


class TestUsage:
    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == EXIT_CONFIG

    def test_module_entry_point(self, tmp_path):
        import subprocess
        import sys

        res = subprocess.run(
            [sys.executable, "-m", "sparseprune", "train-baseline", "--dataset", "synth",
             "--epochs", "0", "--finetune-epochs", "0", "--out", str(tmp_path / "r")],
            capture_output=True, text=True,
        )
        assert res.returncode == EXIT_OK, res.stderr
