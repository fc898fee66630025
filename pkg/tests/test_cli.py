import json
import os
import threading
import time

import numpy as np
import pytest

from layerquant import ImportanceReport, QuantPlan, load_bundle_file, load_store
from layerquant.cli import EXIT_ERROR, EXIT_INSUFFICIENT_MEMORY, EXIT_OK, main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def workspace(tmp_path):
    paths = {
        "weights": tmp_path / "w.st",
        "bundle": tmp_path / "b.st",
        "report": tmp_path / "imp.json",
        "plan": tmp_path / "plan.json",
        "quantized": tmp_path / "q.st",
        "eval": tmp_path / "eval.json",
        "dir": tmp_path,
    }
    rc = run("capture-toy", "--out-weights", paths["weights"],
             "--out-bundle", paths["bundle"], "--seed", 3, "--samples", 2)
    assert rc == EXIT_OK
    return paths


def write_fake_report(path, num_layers):
    report = ImportanceReport(
        metric="jaccard", k=10,
        scores=[i / (10 * num_layers) for i in range(num_layers)],
        ordering=list(range(num_layers)),
    )
    path.write_text(report.to_json())


class TestCaptureToy:
    def test_repeated_invocations_are_byte_identical(self, tmp_path):
        outs = []
        for tag in ("one", "two"):
            w, b = tmp_path / f"w{tag}.st", tmp_path / f"b{tag}.st"
            assert run("capture-toy", "--out-weights", w, "--out-bundle", b,
                       "--seed", 5, "--samples", 2) == EXIT_OK
            outs.append((w.read_bytes(), b.read_bytes()))
        assert outs[0] == outs[1]

    def test_sample_count_flows_into_bundle(self, tmp_path):
        w, b = tmp_path / "w.st", tmp_path / "b.st"
        assert run("capture-toy", "--out-weights", w, "--out-bundle", b,
                   "--samples", 3) == EXIT_OK
        assert load_bundle_file(b).num_samples == 3


class TestImportanceCommand:
    def test_jaccard_report_schema(self, workspace):
        assert run("importance", "--bundle", workspace["bundle"],
                   "--out", workspace["report"]) == EXIT_OK
        doc = json.loads(workspace["report"].read_text())
        assert doc["metric"] == "jaccard"
        assert doc["k"] == 10
        assert len(doc["scores"]) == 4
        assert all(0.0 <= row["score"] <= 1.0 for row in doc["scores"])
        assert sorted(doc["ordering"]) == [0, 1, 2, 3]

    def test_cosine_metric(self, workspace):
        assert run("importance", "--bundle", workspace["bundle"],
                   "--out", workspace["report"], "--metric", "cosine") == EXIT_OK
        doc = json.loads(workspace["report"].read_text())
        assert doc["metric"] == "cosine"
        assert doc["k"] is None

    def test_csv_emitter(self, workspace):
        csv_path = workspace["dir"] / "imp.csv"
        assert run("importance", "--bundle", workspace["bundle"],
                   "--out", workspace["report"], "--csv", csv_path) == EXIT_OK
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "layer,score"
        assert len(lines) == 5

    def test_missing_bundle_is_exit_one(self, workspace):
        assert run("importance", "--bundle", workspace["dir"] / "nope.st",
                   "--out", workspace["report"]) == EXIT_ERROR


class TestPlanCommand:
    def test_mixed_toy_plan(self, workspace):
        assert run("importance", "--bundle", workspace["bundle"],
                   "--out", workspace["report"]) == EXIT_OK
        assert run("plan", "--importance", workspace["report"], "--profile", "toy",
                   "--memory", "60KB", "--out", workspace["plan"]) == EXIT_OK
        plan = QuantPlan.from_json(workspace["plan"].read_text())
        assert plan.counts() == {"fp16": 0, "int8": 1, "int4": 3}
        assert plan.predicted_bytes <= 60_000

    def test_reference_table_row(self, tmp_path):
        report_path = tmp_path / "imp32.json"
        write_fake_report(report_path, 32)
        plan_path = tmp_path / "plan.json"
        assert run("plan", "--importance", report_path, "--profile", "llama2-7b",
                   "--memory", "6GB", "--out", plan_path) == EXIT_OK
        plan = QuantPlan.from_json(plan_path.read_text())
        assert plan.counts() == {"fp16": 0, "int8": 22, "int4": 10}
        assert plan.average_bits == 6.75

    def test_insufficient_memory_exit_code(self, tmp_path):
        report_path = tmp_path / "imp32.json"
        write_fake_report(report_path, 32)
        rc = run("plan", "--importance", report_path, "--profile", "llama2-7b",
                 "--memory", "1GB", "--out", tmp_path / "plan.json")
        assert rc == EXIT_INSUFFICIENT_MEMORY

    def test_env_budget_used_when_no_flag(self, workspace, monkeypatch):
        assert run("importance", "--bundle", workspace["bundle"],
                   "--out", workspace["report"]) == EXIT_OK
        monkeypatch.setenv("LSAQ_MEMORY_BUDGET", "60KB")
        assert run("plan", "--importance", workspace["report"], "--profile", "toy",
                   "--out", workspace["plan"]) == EXIT_OK
        plan = QuantPlan.from_json(workspace["plan"].read_text())
        assert plan.budget_bytes == 60_000

    def test_devices_file_probe_as_budget(self, workspace):
        devices = workspace["dir"] / "devices.json"
        devices.write_text(json.dumps([
            {"device_id": "cuda:0", "free_bytes": 58_000},
            {"device_id": "cuda:1", "free_bytes": 52_000},
        ]))
        assert run("importance", "--bundle", workspace["bundle"],
                   "--out", workspace["report"]) == EXIT_OK
        assert run("plan", "--importance", workspace["report"], "--profile", "toy",
                   "--devices-file", devices, "--out", workspace["plan"]) == EXIT_OK
        plan = QuantPlan.from_json(workspace["plan"].read_text())
        assert plan.budget_bytes == 58_000

    def test_wait_retries_until_budget_rises(self, tmp_path, monkeypatch):
        report_path = tmp_path / "imp32.json"
        write_fake_report(report_path, 32)
        plan_path = tmp_path / "plan.json"
        monkeypatch.setenv("LSAQ_MEMORY_BUDGET", "1GB")

        result = {}

        def planner_thread():
            result["rc"] = run("plan", "--importance", report_path,
                               "--profile", "llama2-7b", "--out", plan_path,
                               "--wait", "--timeout", "30")

        t = threading.Thread(target=planner_thread)
        t.start()
        time.sleep(1.6)  # let at least one poll fail
        os.environ["LSAQ_MEMORY_BUDGET"] = "8GB"
        t.join(timeout=30)
        assert not t.is_alive()
        assert result["rc"] == EXIT_OK
        plan = QuantPlan.from_json(plan_path.read_text())
        assert plan.counts() == {"fp16": 0, "int8": 32, "int4": 0}

    def test_wait_times_out(self, tmp_path, monkeypatch):
        report_path = tmp_path / "imp32.json"
        write_fake_report(report_path, 32)
        monkeypatch.setenv("LSAQ_MEMORY_BUDGET", "1GB")
        start = time.monotonic()
        rc = run("plan", "--importance", report_path, "--profile", "llama2-7b",
                 "--out", tmp_path / "plan.json", "--wait", "--timeout", "2")
        assert rc == EXIT_INSUFFICIENT_MEMORY
        assert time.monotonic() - start >= 2.0

    def test_plan_is_idempotent(self, workspace):
        assert run("importance", "--bundle", workspace["bundle"],
                   "--out", workspace["report"]) == EXIT_OK
        blobs = []
        for _ in range(2):
            assert run("plan", "--importance", workspace["report"], "--profile", "toy",
                       "--memory", "60KB", "--out", workspace["plan"]) == EXIT_OK
            blobs.append(workspace["plan"].read_bytes())
        assert blobs[0] == blobs[1]


class TestQuantizeAndEval:
    def pipeline(self, workspace, memory="60KB"):
        assert run("importance", "--bundle", workspace["bundle"],
                   "--out", workspace["report"]) == EXIT_OK
        assert run("plan", "--importance", workspace["report"], "--profile", "toy",
                   "--memory", memory, "--out", workspace["plan"]) == EXIT_OK
        assert run("quantize", "--weights", workspace["weights"],
                   "--plan", workspace["plan"], "--out", workspace["quantized"]) == EXIT_OK

    def test_quantized_store_is_smaller_and_tagged(self, workspace):
        self.pipeline(workspace)
        assert workspace["quantized"].stat().st_size < workspace["weights"].stat().st_size
        store = load_store(workspace["quantized"])
        assert "plan_id" in store.metadata

    def test_layer_count_mismatch_is_exit_one(self, workspace, tmp_path):
        report_path = tmp_path / "imp32.json"
        write_fake_report(report_path, 32)
        plan_path = tmp_path / "plan32.json"
        assert run("plan", "--importance", report_path, "--profile", "llama2-7b",
                   "--memory", "8GB", "--out", plan_path) == EXIT_OK
        rc = run("quantize", "--weights", workspace["weights"],
                 "--plan", plan_path, "--out", workspace["quantized"])
        assert rc == EXIT_ERROR

    def test_eval_reports_ppl_pair(self, workspace):
        self.pipeline(workspace)
        assert run("eval-toy", "--weights", workspace["weights"],
                   "--quantized", workspace["quantized"],
                   "--out", workspace["eval"]) == EXIT_OK
        doc = json.loads(workspace["eval"].read_text())
        assert set(doc) == {"ppl_fp", "ppl_quant", "relative_delta"}
        assert doc["ppl_fp"] > 1.0
        assert doc["relative_delta"] == pytest.approx(
            (doc["ppl_quant"] - doc["ppl_fp"]) / doc["ppl_fp"])

    @pytest.mark.parametrize("memory,expected_counts", [
        ("100KB", {"fp16": 0, "int8": 4, "int4": 0}),   # all-INT8 budget
        ("49856", {"fp16": 0, "int8": 0, "int4": 4}),   # exactly the all-INT4 floor
        ("60KB", {"fp16": 0, "int8": 1, "int4": 3}),    # mixed
    ])
    def test_eval_across_precisions(self, workspace, memory, expected_counts):
        self.pipeline(workspace, memory=memory)
        plan = QuantPlan.from_json(workspace["plan"].read_text())
        assert plan.counts() == expected_counts
        assert run("eval-toy", "--weights", workspace["weights"],
                   "--quantized", workspace["quantized"],
                   "--out", workspace["eval"]) == EXIT_OK
        doc = json.loads(workspace["eval"].read_text())
        assert set(doc) == {"ppl_fp", "ppl_quant", "relative_delta"}
        assert doc["ppl_quant"] > 1.0


class TestProbe:
    def test_picks_max_free_device(self, tmp_path, capsys):
        devices = tmp_path / "devices.json"
        devices.write_text(json.dumps([
            {"device_id": "a", "free_bytes": 5},
            {"device_id": "b", "free_bytes": 9},
        ]))
        assert run("probe", "--devices-file", devices) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["selected"] == "b"
        assert doc["budget_bytes"] == 9

    def test_tie_break(self, tmp_path, capsys):
        devices = tmp_path / "devices.json"
        devices.write_text(json.dumps([
            {"device_id": "b", "free_bytes": 5},
            {"device_id": "a", "free_bytes": 5},
        ]))
        assert run("probe", "--devices-file", devices) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["selected"] == "a"

    def test_empty_fixture_is_exit_one(self, tmp_path):
        devices = tmp_path / "devices.json"
        devices.write_text("[]")
        assert run("probe", "--devices-file", devices) == EXIT_ERROR

    def test_memory_flag_overrides_probe_budget(self, tmp_path, capsys):
        devices = tmp_path / "devices.json"
        devices.write_text(json.dumps([{"device_id": "a", "free_bytes": 5}]))
        assert run("probe", "--devices-file", devices, "--memory", "2GiB") == EXIT_OK
        assert json.loads(capsys.readouterr().out)["budget_bytes"] == 2 * 2**30


class TestReportCommand:
    def test_strategy_table(self, tmp_path, capsys):
        report_path = tmp_path / "imp32.json"
        write_fake_report(report_path, 32)
        plan_path = tmp_path / "plan.json"
        assert run("plan", "--importance", report_path, "--profile", "llama2-7b",
                   "--memory", "6GB", "--out", plan_path) == EXIT_OK
        capsys.readouterr()
        assert run("report", "--plan", plan_path) == EXIT_OK
        out = capsys.readouterr().out
        assert "llama2-7b" in out
        assert "6.75" in out
        assert "int4 layers (least important):" in out
