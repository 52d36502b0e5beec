import json

import pytest

from assistbench.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "traces.jsonl"
    assert main(["synth", str(path)]) == EXIT_OK
    return path


@pytest.fixture
def short_config(tmp_path, dataset):
    cfg = tmp_path / "bench.yaml"
    cfg.write_text(
        "format_version: 1\n"
        f"dataset: {dataset}\n"
        "window_ms: 300000\n"
        "simulation: {developers: 20, streaming: no_stream, trigger: manual, gpu_count: 1}\n"
        "sweep:\n"
        "  axes: {gpu_count: [1, 4]}\n"
        "  pins: {developers: 20, streaming: no_stream, trigger: manual, model_profile: starcoder2-7b,\n"
        "         quantization_tag: none, max_concurrent_requests: 1000}\n",
        encoding="utf-8",
    )
    return cfg


def test_validate_and_stats(dataset, tmp_path, capsys):
    assert main(["validate", str(dataset)]) == EXIT_OK
    assert "0 malformed lines" in capsys.readouterr().out
    assert main(["stats", str(dataset), "--out", str(tmp_path / "s")]) == EXIT_OK
    assert (tmp_path / "s" / "lifecycle.csv").exists() and (tmp_path / "s" / "usage.csv").exists()


def test_validate_strict_flags_malformed_lines(tmp_path, dataset):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(dataset.read_text(encoding="utf-8") + "{oops\n", encoding="utf-8")
    assert main(["validate", str(bad)]) == EXIT_OK
    assert main(["validate", "--strict", str(bad)]) == EXIT_INVALID


def test_invalid_inputs_exit_1(tmp_path, dataset):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    assert main(["stats", str(empty)]) == EXIT_INVALID
    assert main(["stats", str(tmp_path / "missing.jsonl")]) == EXIT_INVALID
    assert main(["plan", str(dataset), "--developers", "0"]) == EXIT_INVALID
    assert main(["nonsense"]) == EXIT_INVALID
    assert main(["plan", str(dataset), "--gpus", "3"]) == EXIT_INVALID
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("format_version: 7\n", encoding="utf-8")
    assert main(["--config", str(cfg), "stats", str(dataset)]) == EXIT_INVALID


def test_plan_replay_analyze_report(tmp_path, short_config, capsys):
    out = tmp_path / "plans"
    assert main(["plan", "--config", str(short_config), "--out", str(out)]) == EXIT_OK
    (plan,) = sorted(out.glob("plan-*.json"))
    assert main(["replay", str(plan), "--out", str(tmp_path / "r")]) == EXIT_INVALID  # no endpoint, no virtual time
    assert main(["replay", str(plan), "--virtual-time", "--out", str(tmp_path / "r")]) == EXIT_OK
    metrics = json.loads((tmp_path / "r" / "metrics.json").read_text())
    assert metrics["config"]["developers"] == 20
    assert (tmp_path / "r" / "steps.csv").exists()

    store = tmp_path / "sweep"
    assert main(["--virtual-time", "--config", str(short_config), "sweep", "--out", str(store)]) == EXIT_OK
    assert "executed 2 rounds" in capsys.readouterr().out
    assert main(["sweep", "--virtual-time", "--config", str(short_config), "--out", str(store)]) == EXIT_OK
    assert "executed 0 rounds" in capsys.readouterr().out
    assert main(["analyze", str(store), "--recompute"]) == EXIT_OK
    assert (store / "analysis" / "metrics.csv").exists()
    assert main(["report", str(store), "--out", str(tmp_path / "rep")]) == EXIT_OK
    assert (tmp_path / "rep" / "scenario.csv").exists()


def test_sweep_dry_run_reports_size(short_config, tmp_path, capsys):
    assert main(["sweep", "--virtual-time", "--dry-run", "--config", str(short_config),
                 "--out", str(tmp_path / "x")]) == EXIT_OK
    assert "configuration space: 2 configs" in capsys.readouterr().out


def test_runtime_failures_exit_2(tmp_path, short_config):
    assert main(["analyze", str(tmp_path / "nothing")]) == EXIT_RUNTIME
    from assistbench.mock.app import free_port

    assert main(["sweep", "--config", str(short_config), "--endpoint", f"http://127.0.0.1:{free_port()}",
                 "--time-scale", "0.001", "--out", str(tmp_path / "s")]) == EXIT_RUNTIME


def test_tampered_store_fails_recompute(tmp_path, short_config):
    store = tmp_path / "sweep"
    assert main(["sweep", "--virtual-time", "--config", str(short_config), "--out", str(store)]) == EXIT_OK
    samples = next(store.glob("runs/*/r0-s0/samples.csv"))
    lines = samples.read_text().splitlines()
    t, w, src = lines[1].split(",")
    lines[1] = f"{t},{float(w) + 500},{src}"
    samples.write_text("\n".join(lines) + "\n")
    assert main(["analyze", str(store), "--recompute"]) == EXIT_RUNTIME
