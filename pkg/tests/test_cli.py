import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from hyquant.cli import (evaluate_model, load_qconfig, main, qconfig_to_doc,
                         read_report_csv, save_qconfig, write_report_csv)
from hyquant.graph import forward_fp
from hyquant.quant import detect_zero_point_overflow
from hyquant.tensor import Tensor, load_tensor
from hyquant.zoo import build_fixture


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def run_quantize(runner, out, extra=()):
    args = ["quantize", "--fixture", "tiny-mvit-ln", "--out", str(out),
            "--candidates", "4", "--iterations", "1"]
    args.extend(extra)
    return runner.invoke(main, args)


class TestQuantizeCommand:
    def test_writes_qconfig_covering_all_sites(self, runner, tmp_path):
        out = tmp_path / "q.json"
        result = run_quantize(runner, out)
        assert result.exit_code == 0, result.output
        qcfg, bits, mode = load_qconfig(str(out))
        graph, _, _, _ = build_fixture("tiny-mvit-ln")
        assert set(qcfg) == {s.key for s in graph.quant_sites}
        assert bits == 8 and mode == "partial"
        doc = json.loads(out.read_text())
        assert doc["format"] == "hyquant-qconfig/1"
        assert all("objective" in e and "zero_point_raw" in e
                   for e in doc["sites"])

    def test_default_settings_run_under_60s(self, runner, tmp_path):
        out = tmp_path / "q.json"
        start = time.monotonic()
        result = runner.invoke(main, ["quantize", "--fixture", "tiny-mvit-ln",
                                      "--out", str(out)])
        elapsed = time.monotonic() - start
        assert result.exit_code == 0, result.output
        assert elapsed < 60.0

    def test_flag_chain_violation_is_usage_error(self, runner, tmp_path):
        out = tmp_path / "q.json"
        result = run_quantize(runner, out, ["--no-scale-search"])
        assert result.exit_code == 2
        assert "scale" in result.output

    def test_scheme_without_granularity_is_usage_error(self, runner, tmp_path):
        result = run_quantize(runner, tmp_path / "q.json",
                              ["--no-granularity-search"])
        assert result.exit_code == 2

    def test_model_and_fixture_together_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(main, ["quantize", "--out", str(tmp_path / "q")])
        assert result.exit_code == 2

    def test_repeat_runs_byte_identical(self, runner, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run_quantize(runner, a).exit_code == 0
        assert run_quantize(runner, b).exit_code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_trace_csv_written(self, runner, tmp_path):
        out, trace = tmp_path / "q.json", tmp_path / "trace.csv"
        result = run_quantize(runner, out, ["--trace", str(trace)])
        assert result.exit_code == 0
        lines = trace.read_text().splitlines()
        assert lines[0] == "unit,granularity,scheme,candidate,objective"
        assert len(lines) > 10

    def test_unknown_fixture_is_runtime_failure(self, runner, tmp_path):
        result = runner.invoke(main, ["quantize", "--fixture", "nope",
                                      "--out", str(tmp_path / "q.json")])
        assert result.exit_code == 1
        assert "error:" in result.output

    def test_full_mode_round_trips_through_evaluate(self, runner, tmp_path):
        out = tmp_path / "full.json"
        result = run_quantize(runner, out, ["--mode", "full"])
        assert result.exit_code == 0, result.output
        doc = json.loads(out.read_text())
        assert doc["mode"] == "full"
        sites = {(e["layer"], e["site"]) for e in doc["sites"]}
        assert (7, "softmax_in") in sites and (6, "input") in sites
        result = runner.invoke(main, ["evaluate", "--fixture", "tiny-mvit-ln",
                                      "--qconfig", str(out)])
        assert result.exit_code == 0, result.output
        assert json.loads(result.output)["top1_agreement"] >= 0.85

    def test_thread_env_var_does_not_change_output(self, runner, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run_quantize(runner, a).exit_code == 0
        result = runner.invoke(
            main, ["quantize", "--fixture", "tiny-mvit-ln", "--out", str(b),
                   "--candidates", "4", "--iterations", "1"],
            env={"HYQUANT_THREADS": "3"})
        assert result.exit_code == 0, result.output
        assert a.read_bytes() == b.read_bytes()


class TestEvaluateCommand:
    def test_empty_qconfig_reproduces_fp_metrics(self, runner, tmp_path):
        qpath = tmp_path / "empty.json"
        save_qconfig(str(qpath), {}, 8, "partial")
        result = runner.invoke(main, ["evaluate", "--fixture", "tiny-mvit-ln",
                                      "--qconfig", str(qpath)])
        assert result.exit_code == 0, result.output
        metrics = json.loads(result.output)
        assert metrics["quant_top1"] == metrics["fp_top1"]
        assert metrics["top1_agreement"] == 1.0
        assert metrics["mean_logit_mse"] == 0.0

    def test_quantized_beats_or_matches_minmax_baseline(self, runner, tmp_path):
        qfull, qbase = tmp_path / "full.json", tmp_path / "base.json"
        assert run_quantize(runner, qfull, ["--candidates", "16",
                                            "--iterations", "2"]).exit_code == 0
        # the baseline is all flags off (a valid bottom of the monotone chain)
        result = run_quantize(runner, qbase, ["--no-scale-search",
                                              "--no-granularity-search",
                                              "--no-scheme-search"])
        assert result.exit_code == 0, result.output
        agreements = {}
        for name, path in (("full", qfull), ("base", qbase)):
            res = runner.invoke(main, ["evaluate", "--fixture", "tiny-mvit-ln",
                                       "--qconfig", str(path)])
            agreements[name] = json.loads(res.output)["top1_agreement"]
        assert agreements["full"] >= agreements["base"]

    def test_qconfig_for_wrong_model_is_coverage_error(self, runner, tmp_path):
        qpath = tmp_path / "bad.json"
        graph, calib, _, _ = build_fixture("tiny-mvit-ln")
        from hyquant.quant import fit_minmax
        p = fit_minmax(Tensor([-1.0, 1.0]), 8, "symmetric", "per_layer")
        save_qconfig(str(qpath), {(999, "weight"): p}, 8, "partial")
        result = runner.invoke(main, ["evaluate", "--fixture", "tiny-mvit-ln",
                                      "--qconfig", str(qpath)])
        assert result.exit_code == 1
        assert "absent" in result.output

    def test_metrics_file_written(self, runner, tmp_path):
        qpath, mpath = tmp_path / "q.json", tmp_path / "metrics.json"
        save_qconfig(str(qpath), {}, 8, "partial")
        result = runner.invoke(main, ["evaluate", "--fixture", "tiny-mvit-ln",
                                      "--qconfig", str(qpath),
                                      "--out", str(mpath)])
        assert result.exit_code == 0
        doc = json.loads(mpath.read_text())
        assert doc["format"] == "hyquant-metrics/1"


class TestReportCommand:
    def test_report_flags_match_detector(self, runner, tmp_path):
        out = tmp_path / "report.csv"
        result = runner.invoke(main, ["report", "--fixture", "overflow-bridge",
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        rows = read_report_csv(str(out))
        graph, calib, _, _ = build_fixture("overflow-bridge")
        from hyquant.zoo import BRIDGE_KXK_ID
        site_rows = [r for r in rows
                     if r["layer"] == BRIDGE_KXK_ID and r["site"] == "input"]
        _, outs = forward_fp(graph, calib, watch={2})
        rep = detect_zero_point_overflow(outs[2], 8, axis=1)
        assert [r["flagged"] for r in site_rows] == \
            [c.flagged for c in rep.channels]
        assert "overflow flags" in result.output

    def test_plain_fixture_bridge_site_unflagged(self, runner, tmp_path):
        out = tmp_path / "report.csv"
        result = runner.invoke(main, ["report", "--fixture", "tiny-mvit-ln",
                                      "--out", str(out)])
        assert result.exit_code == 0
        from hyquant.zoo import BRIDGE_KXK_ID
        rows = [r for r in read_report_csv(str(out))
                if r["layer"] == BRIDGE_KXK_ID]
        assert rows and not any(r["flagged"] for r in rows)

    def test_csv_round_trips_exactly(self, tmp_path):
        rows = [{"layer": 3, "site": "input", "channel": 5,
                 "calib_min": -0.12345678912345, "calib_max": 1.5,
                 "val_min": -0.25, "val_max": 1.0625,
                 "zero_point_raw": -128.000001, "flagged": True}]
        path = tmp_path / "r.csv"
        write_report_csv(str(path), rows)
        assert read_report_csv(str(path)) == rows


class TestFixturesCommand:
    def test_list_names_all_fixtures(self, runner):
        result = runner.invoke(main, ["fixtures", "list"])
        assert result.exit_code == 0
        for name in ("tiny-mvit-ln", "overflow-bridge", "wide-mvit-ln"):
            assert name in result.output

    def test_export_then_quantize_matches_fixture_path(self, runner, tmp_path):
        exp = tmp_path / "exported"
        result = runner.invoke(main, ["fixtures", "export", "tiny-mvit-ln",
                                      "--out", str(exp)])
        assert result.exit_code == 0, result.output
        calib = load_tensor(exp / "calib.hqt")
        assert calib.shape == (32, 3, 16, 16)
        q_fixture = tmp_path / "q_fixture.json"
        q_export = tmp_path / "q_export.json"
        assert run_quantize(runner, q_fixture).exit_code == 0
        result = runner.invoke(main, [
            "quantize", "--model", str(exp / "model.json"),
            "--calib", str(exp / "calib.hqt"), "--out", str(q_export),
            "--candidates", "4", "--iterations", "1"])
        assert result.exit_code == 0, result.output
        assert q_fixture.read_bytes() == q_export.read_bytes()

    def test_export_unknown_fixture_fails_cleanly(self, runner, tmp_path):
        result = runner.invoke(main, ["fixtures", "export", "nope",
                                      "--out", str(tmp_path)])
        assert result.exit_code == 1


class TestDocuments:
    def test_qconfig_doc_round_trip(self, tmp_path):
        graph, calib, _, _ = build_fixture("tiny-mvit-ln")
        from hyquant.calib import CalibOptions, SearchSpace, calibrate
        qcfg, _ = calibrate(graph, calib, SearchSpace(candidates=3, iterations=1),
                            CalibOptions(), bits=8)
        path = tmp_path / "q.json"
        save_qconfig(str(path), qcfg, 8, "partial")
        back, bits, mode = load_qconfig(str(path))
        assert qconfig_to_doc(back, bits, mode) == qconfig_to_doc(qcfg, 8, "partial")

    def test_bad_format_rejected(self, tmp_path):
        path = tmp_path / "q.json"
        path.write_text(json.dumps({"format": "elsewhere/2", "sites": []}))
        from hyquant.quant import QuantError
        with pytest.raises(QuantError, match="format"):
            load_qconfig(str(path))

    def test_evaluate_model_empty_config_identity(self):
        graph, _, ev, labels = build_fixture("tiny-mvit-ln")
        m = evaluate_model(graph, {}, ev, labels)
        assert m["top1_agreement"] == 1.0 and m["mean_logit_mse"] == 0.0
