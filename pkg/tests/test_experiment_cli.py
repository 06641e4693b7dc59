import json
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import contalign.strategies
from contalign.cli import main
from contalign.config import (
    SCHEMA_VERSION,
    config_from_dict,
    config_to_dict,
    default_config,
    load_config,
    save_config,
)
from contalign.experiment import (
    COMPARISON_HEADER,
    ablation_sweep,
    backbone_cache_key,
    ensure_backbone,
    run_experiment,
)

from conftest import TEST_CACHE, micro_config


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and "cache" not in p.parts
    }


@pytest.fixture()
def micro_run_config():
    return micro_config(n_tasks=2, strategies=("naive", "routed"))


class TestConfig:
    def test_round_trip_lossless(self, tmp_path):
        config = default_config()
        path = tmp_path / "config.json"
        save_config(path, config)
        assert load_config(path) == config

    def test_micro_round_trip(self, tmp_path, micro_run_config):
        path = tmp_path / "c.json"
        save_config(path, micro_run_config)
        assert load_config(path) == micro_run_config

    def test_schema_version_checked(self):
        payload = config_to_dict(default_config())
        payload["schema_version"] = 99
        with pytest.raises(ValueError, match="schema version"):
            config_from_dict(payload)

    def test_default_config_covers_all_strategies(self):
        names = {s.name for s in default_config().strategies}
        assert names == set(contalign.strategies.STRATEGIES)


class TestBackboneCache:
    def test_cache_hit_avoids_retraining(self, micro_run_config):
        backbone1, path1 = ensure_backbone(micro_run_config, TEST_CACHE)
        backbone2, path2 = ensure_backbone(micro_run_config, TEST_CACHE)
        assert path1 == path2
        assert backbone1.parameter_hash() == backbone2.parameter_hash()

    def test_missing_cache_with_pretrain_disabled(self, tmp_path, micro_run_config):
        config = replace(micro_run_config, allow_pretrain=False)
        with pytest.raises(FileNotFoundError, match="pretraining is disabled"):
            ensure_backbone(config, tmp_path / "empty-cache")

    def test_key_depends_on_backbone_settings(self, micro_run_config):
        other = replace(micro_run_config, backbone_seed=99)
        assert backbone_cache_key(micro_run_config) != backbone_cache_key(other)


def _seed_cache(out: Path, config) -> None:
    """Copy the shared test backbone into a run's cache directory."""
    key = backbone_cache_key(config)
    src = TEST_CACHE / f"backbone_{key}.bin"
    dst = out / "cache" / f"backbone_{key}.bin"
    dst.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, dst)


class TestRunExperiment:
    def test_micro_run_produces_reports(self, tmp_path, micro_run_config, micro_backbone):
        out = tmp_path / "run"
        manifest = run_experiment(micro_run_config, out, cache_dir=TEST_CACHE)
        assert manifest["all_ok"]
        assert set(manifest["strategies"]) == {"naive", "routed"}
        comparison = (out / "comparison.csv").read_text().splitlines()
        assert comparison[0] == COMPARISON_HEADER
        assert len(comparison) == 3
        for name in ("naive", "routed"):
            d = out / "strategies" / name
            assert (d / "stage_metrics.csv").exists()
            assert (d / "summary.json").exists()
        assert (out / "strategies/routed/pool/pool.json").exists()
        assert (out / "strategies/routed/routing_log.csv").exists()
        summary = json.loads((out / "strategies/routed/summary.json").read_text())
        assert "ood_eval" in summary
        assert summary["exemplar_free"] is True

    def test_single_task_run_one_row_table(self, tmp_path, micro_backbone):
        config = micro_config(n_tasks=1, strategies=("naive",))
        manifest = run_experiment(config, tmp_path / "run", cache_dir=TEST_CACHE)
        assert manifest["all_ok"]
        rows = (tmp_path / "run" / "strategies/naive/stage_metrics.csv").read_text().splitlines()
        assert rows[0] == "stage,task,n,iou,biou"
        assert len(rows) == 2

    def test_rerun_byte_identical(self, tmp_path, micro_run_config, micro_backbone):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run_experiment(micro_run_config, out1, cache_dir=TEST_CACHE)
        run_experiment(micro_run_config, out2, cache_dir=TEST_CACHE)
        tree1, tree2 = _tree_bytes(out1), _tree_bytes(out2)
        assert tree1.keys() == tree2.keys()
        for name in tree1:
            assert tree1[name] == tree2[name], f"{name} differs between reruns"

    def test_crash_isolation(self, tmp_path, micro_run_config, micro_backbone, monkeypatch):
        def explode(stream, backbone, cfg):
            raise RuntimeError("synthetic failure")

        monkeypatch.setitem(contalign.strategies.STRATEGIES, "naive", explode)
        manifest = run_experiment(micro_run_config, tmp_path / "run", cache_dir=TEST_CACHE)
        assert not manifest["all_ok"]
        assert manifest["strategies"]["naive"]["status"] == "failed"
        assert "synthetic failure" in manifest["strategies"]["naive"]["error"]
        assert manifest["strategies"]["routed"]["status"] == "ok"
        comparison = (tmp_path / "run" / "comparison.csv").read_text().splitlines()
        assert len(comparison) == 2  # header + routed only

    def test_empty_strategy_list_header_only(self, tmp_path, micro_backbone):
        config = micro_config(n_tasks=1, strategies=())
        manifest = run_experiment(config, tmp_path / "run", cache_dir=TEST_CACHE)
        assert manifest["all_ok"]
        assert (tmp_path / "run" / "comparison.csv").read_text() == COMPARISON_HEADER + "\n"

    def test_parallel_jobs_match_serial(self, tmp_path, micro_run_config, micro_backbone):
        serial, parallel = tmp_path / "s", tmp_path / "p"
        run_experiment(micro_run_config, serial, cache_dir=TEST_CACHE, jobs=1)
        run_experiment(micro_run_config, parallel, cache_dir=TEST_CACHE, jobs=2)
        tree_s, tree_p = _tree_bytes(serial), _tree_bytes(parallel)
        assert tree_s.keys() == tree_p.keys()
        for name in tree_s:
            assert tree_s[name] == tree_p[name], f"{name} differs with jobs=2"


class TestSweeps:
    def test_tau_rule_sweep_monotone(self, tmp_path, micro_backbone):
        config = micro_config(n_tasks=2, strategies=("routed",))
        path = ablation_sweep(config, "tau_rule", tmp_path, cache_dir=TEST_CACHE)
        rows = json.loads((tmp_path / "sweep_tau_rule.json").read_text())["rows"]
        by_rule = {r["rule"]: r for r in rows}
        for tid in (0, 1):
            col = f"tau_task{tid}"
            assert by_rule["p95"][col] <= by_rule["p97"][col] <= by_rule["p99"][col]
        assert path.exists()

    def test_n_blocks_sweep_rows(self, tmp_path, micro_backbone):
        config = micro_config(n_tasks=1, strategies=("routed",))
        ablation_sweep(config, "n_blocks", tmp_path, grid=(1, 2), cache_dir=TEST_CACHE)
        rows = json.loads((tmp_path / "sweep_n_blocks.json").read_text())["rows"]
        assert [r["n_blocks"] for r in rows] == [1, 2]

    def test_unknown_axis_rejected(self, tmp_path, micro_backbone):
        config = micro_config(n_tasks=1)
        with pytest.raises(ValueError, match="unknown sweep axis"):
            ablation_sweep(config, "learning_rate", tmp_path, cache_dir=TEST_CACHE)


class TestCli:
    def test_pretrain_verb(self, tmp_path, capsys, micro_backbone):
        config = micro_config(n_tasks=1)
        cfg_path = tmp_path / "config.json"
        save_config(cfg_path, config)
        code = main(["pretrain", "--config", str(cfg_path), "--out", str(TEST_CACHE)])
        assert code == 0
        assert "backbone ready" in capsys.readouterr().out

    def test_run_route_report_cycle(self, tmp_path, capsys, micro_backbone):
        config = micro_config(n_tasks=2, strategies=("routed",))
        cfg_path = tmp_path / "config.json"
        save_config(cfg_path, config)
        out = tmp_path / "run"
        _seed_cache(out, config)
        code = main(["run", "--config", str(cfg_path), "--out", str(out),
                     "--export-stream"])
        assert code == 0
        assert (out / "stream" / "stream.json").exists()

        route_out = tmp_path / "route"
        backbone_file = out / "cache" / f"backbone_{backbone_cache_key(config)}.bin"
        code = main([
            "route",
            "--pool", str(out / "strategies/routed/pool"),
            "--data", str(out / "stream"),
            "--backbone", str(backbone_file),
            "--out", str(route_out),
        ])
        assert code == 0
        decisions = (route_out / "routing_decisions.csv").read_text().splitlines()
        assert decisions[0] == "task,chosen,score"
        assert len(decisions) > 1

        report_out = tmp_path / "rebuilt"
        code = main(["report", "--run", str(out), "--out", str(report_out)])
        assert code == 0
        original = (out / "comparison.csv").read_text()
        rebuilt = (report_out / "comparison.csv").read_text()
        assert rebuilt == original

    def test_run_exit_code_on_failure(self, tmp_path, monkeypatch, micro_backbone):
        def explode(stream, backbone, cfg):
            raise RuntimeError("nope")

        monkeypatch.setitem(contalign.strategies.STRATEGIES, "naive", explode)
        config = micro_config(n_tasks=1, strategies=("naive",))
        cfg_path = tmp_path / "config.json"
        save_config(cfg_path, config)
        out = tmp_path / "run"
        _seed_cache(out, config)
        assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 1

    def test_seed_override_changes_results(self, tmp_path, micro_backbone):
        config = micro_config(n_tasks=1, strategies=("naive",))
        cfg_path = tmp_path / "config.json"
        save_config(cfg_path, config)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            _seed_cache(out, config)
        assert main(["run", "--config", str(cfg_path), "--out", str(out1)]) == 0
        code = main(["run", "--config", str(cfg_path), "--out", str(out2),
                     "--seed-override", "777"])
        assert code == 0
        m1 = json.loads((out1 / "manifest.json").read_text())
        m2 = json.loads((out2 / "manifest.json").read_text())
        assert m1["config"]["master_seed"] == 4242
        assert m2["config"]["master_seed"] == 777
        t1 = (out1 / "strategies/naive/stage_metrics.csv").read_text()
        t2 = (out2 / "strategies/naive/stage_metrics.csv").read_text()
        assert t1 != t2

    def test_report_on_empty_dir_fails(self, tmp_path, capsys):
        assert main(["report", "--run", str(tmp_path)]) == 1

    def test_route_with_bad_pool_fails(self, tmp_path, capsys):
        code = main(["route", "--pool", str(tmp_path), "--data", str(tmp_path),
                     "--backbone", str(tmp_path / "nope.bin"), "--out",
                     str(tmp_path / "o")])
        assert code == 1
        assert "error:" in capsys.readouterr().err
