import hashlib
import json
import os
import socket
import subprocess
import sys
import time
import urllib.request

import pytest

from wstta.cli import main
from wstta.detector import build_model, save_checkpoint
from wstta.scenes import CATEGORIES
from wstta.session import RunReport


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "fresh.ckpt"
    save_checkpoint(build_model(0, list(CATEGORIES)), path)
    return str(path)


def _adapt_args(checkpoint, report, method="wstta", extra=()):
    return ["adapt", "--model", checkpoint, "--method", method, "--frames", "2",
            "--eval-every", "0", "--eval-count", "4", "--report", report, *extra]


class TestPretrainCmd:
    def test_zero_steps_equals_fresh_init(self, tmp_path):
        out = tmp_path / "zero.ckpt"
        rc = main(["pretrain", "--out", str(out), "--steps", "0", "--seed", "4",
                   "--train-count", "2", "--eval-count", "0"])
        assert rc == 0
        ref = tmp_path / "ref.ckpt"
        save_checkpoint(build_model(4, list(CATEGORIES)), ref)
        assert out.read_bytes() == ref.read_bytes()

    def test_same_flags_identical_checkpoints(self, tmp_path):
        args = ["pretrain", "--steps", "2", "--seed", "1", "--train-count", "4",
                "--eval-count", "0"]
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_loss_curve_written(self, tmp_path):
        out = tmp_path / "c.ckpt"
        curve = tmp_path / "curve.csv"
        rc = main(["pretrain", "--out", str(out), "--steps", "2", "--train-count", "4",
                   "--eval-count", "0", "--curve", str(curve)])
        assert rc == 0
        lines = curve.read_text().strip().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 3


class TestAdaptCmd:
    def test_step_count_and_config_echo(self, checkpoint, tmp_path, capsys):
        report_path = tmp_path / "run.ndjson"
        rc = main(_adapt_args(checkpoint, str(report_path)))
        assert rc == 0
        report = RunReport.from_ndjson(report_path.read_text())
        assert len(report.steps) == 2
        adaptation = report.config["adaptation"]
        assert adaptation["omega"] == 0.94
        assert adaptation["delta"] == 0.005
        assert adaptation["lambda_"] == 0.1
        assert adaptation["alpha"] == 0.1
        assert adaptation["tau"] == 0.8
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["steps"] == 2

    def test_report_roundtrip_lossless(self, checkpoint, tmp_path):
        report_path = tmp_path / "run.ndjson"
        main(_adapt_args(checkpoint, str(report_path)))
        text = report_path.read_text()
        report = RunReport.from_ndjson(text)
        assert report.to_ndjson() == text
        assert os.path.exists(tmp_path / "run.csv")

    def test_source_method_final_map_is_baseline(self, checkpoint, tmp_path, capsys):
        rc = main(["eval", "--model", checkpoint, "--split", "target-test",
                   "--count", "4"])
        assert rc == 0
        baseline = json.loads(capsys.readouterr().out.strip())["map50"]

        report_path = tmp_path / "src.ndjson"
        rc = main(_adapt_args(checkpoint, str(report_path), method="source"))
        assert rc == 0
        report = RunReport.from_ndjson(report_path.read_text())
        assert report.final_map50 == baseline

    def test_determinism_across_invocations(self, checkpoint, tmp_path):
        p1, p2 = tmp_path / "r1.ndjson", tmp_path / "r2.ndjson"
        main(_adapt_args(checkpoint, str(p1), extra=["--seed", "9"]))
        main(_adapt_args(checkpoint, str(p2), extra=["--seed", "9"]))
        r1 = RunReport.from_ndjson(p1.read_text())
        r2 = RunReport.from_ndjson(p2.read_text())
        assert r1.core() == r2.core()

    def test_missing_checkpoint_is_runtime_error(self, tmp_path):
        rc = main(_adapt_args(str(tmp_path / "missing.ckpt"), str(tmp_path / "r.ndjson")))
        assert rc == 2

    def test_unknown_method_is_usage_error(self, checkpoint, tmp_path, capsys):
        rc = main(["adapt", "--model", checkpoint, "--method", "telepathy"])
        capsys.readouterr()
        assert rc == 1


class TestSweepCmd:
    def test_omega_sweep_rows(self, checkpoint, tmp_path, capsys):
        out_dir = tmp_path / "sweep"
        rc = main(["sweep", "--vary", "omega", "--values", "1.0,0.99", "--repeats", "1",
                   "--model", checkpoint, "--frames", "2", "--eval-every", "0",
                   "--eval-count", "4", "--out-dir", str(out_dir)])
        assert rc == 0
        rows = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        assert [r["value"] for r in rows] == [1.0, 0.99]
        csv_text = (out_dir / "sweep.csv").read_text()
        assert csv_text.startswith("value,mean_map50,std_map50,runs")
        assert len((out_dir / "sweep.csv").read_text().strip().splitlines()) == 3

    def test_order_sweep_without_values(self, checkpoint, tmp_path):
        out_dir = tmp_path / "orders"
        rc = main(["sweep", "--vary", "order", "--repeats", "2",
                   "--model", checkpoint, "--frames", "2", "--eval-every", "0",
                   "--eval-count", "4", "--out-dir", str(out_dir)])
        assert rc == 0
        runs = [p for p in os.listdir(out_dir) if p.endswith(".ndjson")]
        assert len(runs) == 2

    def test_empty_values_usage_error(self, checkpoint, tmp_path):
        rc = main(["sweep", "--vary", "noise", "--model", checkpoint,
                   "--out-dir", str(tmp_path / "x")])
        assert rc == 1


class TestEvalRenderCmds:
    def test_eval_prints_result(self, checkpoint, capsys):
        rc = main(["eval", "--model", checkpoint, "--split", "source-test",
                   "--count", "4"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out.strip())
        assert out["split"] == "source-test"
        assert 0.0 <= out["map50"] <= 1.0

    def test_gate_failure_exit_code(self, checkpoint, capsys):
        rc = main(["eval", "--model", checkpoint, "--split", "source-test",
                   "--count", "4", "--gate-map", "1.01"])
        capsys.readouterr()
        assert rc == 3

    def test_render_deterministic(self, tmp_path, capsys):
        d1, d2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["render", "--out-dir", str(d1), "--count", "3", "--seed", "5",
                     "--domain", "target"]) == 0
        assert main(["render", "--out-dir", str(d2), "--count", "3", "--seed", "5",
                     "--domain", "target"]) == 0
        capsys.readouterr()
        for name in sorted(os.listdir(d1)):
            a = hashlib.sha256((d1 / name).read_bytes()).hexdigest()
            b = hashlib.sha256((d2 / name).read_bytes()).hexdigest()
            assert a == b, name


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestServeCmd:
    def test_serve_health(self):
        port = _free_port()
        proc = subprocess.Popen(
            [sys.executable, "-m", "wstta.cli", "serve", "--port", str(port)],
            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        try:
            deadline = time.time() + 30
            last_err = None
            while time.time() < deadline:
                try:
                    with urllib.request.urlopen(
                            f"http://127.0.0.1:{port}/api/health", timeout=2) as resp:
                        assert json.loads(resp.read()) == {"status": "ok"}
                        return
                except (ConnectionError, urllib.error.URLError, OSError) as exc:
                    last_err = exc
                    time.sleep(0.3)
            pytest.fail(f"server did not come up: {last_err}")
        finally:
            proc.terminate()
            proc.wait(timeout=10)
