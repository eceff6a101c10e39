import json

import pytest

from llmoe import cli
from llmoe.config import ConfigError, load_config

from conftest import write_config


def run(config, *args):
    return cli.main([args[0], "--config", str(config), *args[1:]])


def test_prepare_writes_artifacts_and_is_idempotent(tmp_path, capsys):
    config = write_config(tmp_path)
    assert run(config, "prepare") == 0
    out = tmp_path / "out"
    names = ["samples_train.jsonl", "samples_test.jsonl", "features.csv", "dataset_manifest.json"]
    first = {n: (out / n).read_bytes() for n in names}
    manifest = json.loads(first["dataset_manifest.json"])
    assert manifest["trading_days"] == 120 and manifest["samples"] == 120 - 34
    assert manifest["train"]["count"] + manifest["test"]["count"] == manifest["samples"]
    assert manifest["train"]["last"] < manifest["test"]["first"]
    assert (out / "data" / "prices.csv").exists()
    assert run(config, "prepare") == 0
    assert {n: (out / n).read_bytes() for n in names} == first
    assert "86 samples" in capsys.readouterr().out


def test_prepare_from_csv_files(tmp_path):
    (tmp_path / "a").mkdir()
    write_config(tmp_path / "a")
    assert run(tmp_path / "a" / "config.yaml", "prepare") == 0
    data = tmp_path / "a" / "out" / "data"
    config = write_config(tmp_path, data={"prices": str(data / "prices.csv"), "news": str(data / "news.csv"),
                                          "symbol": "SYN"})
    assert run(config, "prepare") == 0

    def rows(root):
        # CSV input carries no hidden regime, so that field is dropped from the comparison.
        lines = (root / "out" / "samples_train.jsonl").read_text().splitlines()
        return [{k: v for k, v in json.loads(x).items() if k != "next_regime"} for x in lines]

    assert rows(tmp_path) == rows(tmp_path / "a")


def test_missing_price_file_exit_code(tmp_path, capsys):
    config = write_config(tmp_path, data={"prices": "nowhere.csv"})
    assert run(config, "prepare") == 2
    assert "nowhere.csv" in capsys.readouterr().err


def test_route_before_prepare_is_config_error(tmp_path, capsys):
    assert run(write_config(tmp_path), "route") == 2
    assert "prepare" in capsys.readouterr().err


def test_route_rule_counts(tmp_path):
    config = write_config(tmp_path)
    run(config, "prepare")
    assert run(config, "route") == 0
    summary = json.loads((tmp_path / "out" / "routing.json").read_text())
    counts = summary["train"]
    assert sum(counts.values()) + sum(summary["test"].values()) == summary["samples"] == 86
    assert summary["endpoint_calls"] == 0


def test_route_llm_fills_cache_then_replays(tmp_path, stub_chat):
    stub = stub_chat(reply=lambda n, body: "Optimistic" if n % 2 else "Pessimistic\nsoft demand")
    config = write_config(tmp_path, router={"kind": "llm", "endpoint": stub.url, "model": "stub", "retry_backoff": 0})
    run(config, "prepare")
    assert run(config, "route") == 0
    cache = tmp_path / "out" / "decisions_cache.jsonl"
    lines = [json.loads(x) for x in cache.read_text().splitlines()]
    assert len(lines) == 86 == len(stub.requests)
    assert run(config, "route") == 0
    assert len(stub.requests) == 86
    assert json.loads((tmp_path / "out" / "routing.json").read_text())["endpoint_calls"] == 0
    assert run(config, "run", "--router", "cache") == 0
    assert len(stub.requests) == 86


def test_cache_router_without_cache_fails(tmp_path, capsys):
    config = write_config(tmp_path, router={"kind": "cache"})
    run(config, "prepare")
    assert run(config, "route") == 1
    assert "cache" in capsys.readouterr().err.lower()


def test_run_writes_reports(tmp_path, capsys):
    config = write_config(tmp_path, models=("llmoe", "moe2", "mlp"))
    run(config, "prepare")
    capsys.readouterr()
    assert run(config, "run") == 0
    out = tmp_path / "out"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["columns"] == ["TR", "SR", "CR", "SoR", "VOL", "DD", "MDD"]
    assert [row["model"] for row in summary["models"]] == ["MLP", "MoE_2", "LLMoE"]
    assert (out / "reports" / "llmoe" / "policy_seed_1" / "manifest.json").exists()
    assert (out / "reports" / "mlp" / "equity_seed_2.csv").exists()
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["Model", "TR", "SR", "CR", "SoR", "VOL", "DD", "MDD"]


def test_run_parallel_matches_serial(tmp_path):
    config = write_config(tmp_path, seeds=(1, 2, 3))
    run(config, "prepare")
    run(config, "run")
    serial = (tmp_path / "out" / "summary.json").read_bytes()
    run(config, "run", "--jobs", "2")
    assert (tmp_path / "out" / "summary.json").read_bytes() == serial


def test_seed_override(tmp_path):
    config = write_config(tmp_path)
    run(config, "prepare")
    assert run(config, "run", "--seeds", "4,5") == 0
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["seeds"] == [4, 5]
    assert run(config, "run", "--seeds", "x") == 2


def test_gridsearch_single_cell(tmp_path):
    config = write_config(tmp_path, grid={"learning_rate": [0.001], "batch_size": [32]})
    run(config, "prepare")
    assert run(config, "gridsearch") == 0
    report = json.loads((tmp_path / "out" / "grid_report.json").read_text())
    assert len(report["rows"]) == 1
    assert report["best"] == report["rows"][0]
    assert report["train"] + report["validation"] == json.loads(
        (tmp_path / "out" / "dataset_manifest.json").read_text())["train"]["count"]


def test_gridsearch_full_grid_and_tie_rule(tmp_path, monkeypatch):
    grid = {"learning_rate": [0.003, 0.001, 0.0003], "batch_size": [64, 16, 32]}
    config = write_config(tmp_path, grid=grid, epochs=1)
    run(config, "prepare")
    monkeypatch.setattr(cli, "accuracy", lambda preds, samples: 0.5)
    assert run(config, "gridsearch") == 0
    report = json.loads((tmp_path / "out" / "grid_report.json").read_text())
    assert len(report["rows"]) == 9
    assert (report["best"]["learning_rate"], report["best"]["batch_size"]) == (0.0003, 16)


@pytest.mark.parametrize("section, body, needle", [
    ("router", {"kind": "psychic"}, "router.kind"),
    ("router", {"colour": 1}, "unknown keys"),
    ("training", {"seeds": []}, "seeds"),
    ("experiment", {"models": ["gpt"]}, "unknown models"),
    ("experiment", {"grid": {"momentum": [0.9]}}, "momentum"),
])
def test_config_errors(tmp_path, section, body, needle):
    import yaml
    path = write_config(tmp_path)
    raw = yaml.safe_load(path.read_text())
    raw[section] = {**raw[section], **body}
    path.write_text(yaml.safe_dump(raw))
    with pytest.raises((ConfigError, ValueError), match=needle):
        load_config(path).validate()


def test_missing_config_exit_code(tmp_path):
    assert cli.main(["prepare", "--config", str(tmp_path / "none.yaml")]) == 2
