"""
test_app.py — Configuration, auto-vérifications et ligne de commande
====================================================================
Framework : pytest + unittest.mock (monkeypatch, tmp_path)
Objectif  : parcours complet gen-data → train → plan → render → bench sur
            une configuration réduite, codes de sortie compris.

3 suites :
  1. Résolution de la configuration (priorités, graine maîtresse, erreurs)
  2. Auto-vérifications
  3. Ligne de commande (codes de sortie, fichiers produits)
"""

import json
import math
from unittest.mock import patch

import pytest

from app import EXIT_FAILED, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE, build_parser, main
from config import (
    OUTPUT_ENV_VAR,
    RESOLVED_CONFIG_NAME,
    ConfigError,
    GridSpec,
    OptimizationConfig,
    RunConfig,
    from_dict,
    load_run_config,
)
from data.stores import load_trajectory, save_scenario
from engine.geometry import CircleObstacle, Scenario
from engine.selfcheck import SUITES, run_selfcheck

TINY_RUN = {
    "seed": 5,
    "sampler": {"n_scenarios_train": 2, "n_scenarios_test": 1, "samples_per_scenario": 50,
                "obstacle_count_range": [1, 1]},
    "architecture": {"hidden_width": 8, "hidden_layers": 3, "extractor_width": 6, "gate_layers": [2, 3]},
    "training": {"steps": 4, "batch_size": 8, "log_interval": 2, "checkpoint_interval": 2},
    "optimization": {"iterations": 20},
    "experiment": {"planners": ["rrt_connect"], "region_pairs": [["left", "right"]],
                   "n_conditions": 1, "trials_per_condition": 1, "path_steps": 20},
}


def _write_json(path, data) -> str:
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


# ═══════════════════════════════════════════════
# SUITE 1 : CONFIGURATION
# ═══════════════════════════════════════════════

class TestConfig:

    def test_defaults(self, monkeypatch):
        monkeypatch.delenv(OUTPUT_ENV_VAR, raising=False)
        cfg = load_run_config()
        assert cfg == RunConfig()
        assert cfg.training.lambda_rec == 100.0 and cfg.training.lambda_col_boost == 1000.0

    def test_precedence_file_env_flags(self, tmp_path, monkeypatch):
        path = _write_json(tmp_path / "cfg.json", {"output_dir": "from_file", "training": {"steps": 7}})
        monkeypatch.delenv(OUTPUT_ENV_VAR, raising=False)
        assert load_run_config(path).output_dir == "from_file"
        monkeypatch.setenv(OUTPUT_ENV_VAR, "from_env")
        assert load_run_config(path).output_dir == "from_env"
        cfg = load_run_config(path, {"output_dir": "from_flag", "training": {"steps": 9}})
        assert cfg.output_dir == "from_flag"
        assert cfg.training.steps == 9

    def test_master_seed_fills_sections(self, tmp_path):
        path = _write_json(tmp_path / "cfg.json", {"seed": 7, "training": {"seed": 3}})
        cfg = load_run_config(path)
        assert cfg.sampler.seed == 7 and cfg.planner.seed == 7 and cfg.experiment.seed == 7
        assert cfg.training.seed == 3

    def test_json_lists_become_tuples(self, tmp_path):
        cfg = load_run_config(_write_json(tmp_path / "cfg.json", TINY_RUN))
        assert cfg.architecture.gate_layers == (2, 3)
        assert cfg.experiment.region_pairs == (("left", "right"),)

    @pytest.mark.parametrize("data", [
        {"unknown": 1},
        {"training": {"lr": 0.1}},
        {"training": {"steps": "ten"}},
        {"grid": {"width": 0}},
        {"optimization": {"iterations": 0}},
        {"optimization": {"iterations": 2501}},
        [1, 2, 3],
    ])
    def test_invalid_configurations(self, tmp_path, data):
        with pytest.raises(ConfigError):
            load_run_config(_write_json(tmp_path / "cfg.json", data))

    def test_missing_or_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_run_config(bad)

    def test_optimization_bounds(self):
        assert OptimizationConfig(iterations=2500).iterations == 2500
        with pytest.raises(ConfigError):
            OptimizationConfig(criterion="snap")

    def test_grid_spec_from_dict(self):
        assert from_dict(GridSpec, {"width": 8, "height": 4}).n_cells == 32


# ═══════════════════════════════════════════════
# SUITE 2 : AUTO-VÉRIFICATIONS
# ═══════════════════════════════════════════════

class TestSelfcheck:

    def test_all_suites_pass(self):
        results = run_selfcheck(seed=0)
        assert [r.name for r in results] == list(SUITES)
        assert all(r.passed for r in results), [(r.name, r.detail) for r in results if not r.passed]

    def test_injected_fault_fails_gradient_suite(self):
        results = {r.name: r for r in run_selfcheck(seed=0, inject_fault=True)}
        assert not results["gradients"].passed
        assert results["geometry"].passed

    def test_crashing_suite_counts_as_failure(self):
        def boom(rng, fault):
            raise RuntimeError("boom")

        with patch.dict(SUITES, {"gan-half": boom}):
            results = run_selfcheck(suites=("gan-half",))
        assert not results[0].passed
        assert "RuntimeError" in results[0].detail


# ═══════════════════════════════════════════════
# SUITE 3 : LIGNE DE COMMANDE
# ═══════════════════════════════════════════════

@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _write_json(root / "tiny.json", TINY_RUN)
    out = root / "out"
    assert main(["gen-data", "--config", cfg, "--out", str(out), "--log-level", "WARNING"]) == EXIT_OK
    assert main(["train", "--config", cfg, "--out", str(out), "--log-level", "WARNING"]) == EXIT_OK
    scene = Scenario.build([CircleObstacle((1.5, 0.0), 0.2)], GridSpec(), scenario_id=0)
    save_scenario(scene, root / "scene.json")
    return root, cfg, out


class TestCli:

    def test_parser_reads_postures(self):
        args = build_parser().parse_args(["plan", "--model", "m", "--start=-1,0.5", "--goal=1,0"])
        assert args.start.tolist() == [-1.0, 0.5]
        assert args.cag is False

    def test_parser_rejects_bad_posture(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["plan", "--model", "m", "--start=a,b", "--goal=1,0"])

    def test_command_is_required(self):
        with pytest.raises(SystemExit):
            main([])

    def test_selfcheck_exit_codes(self):
        assert main(["selfcheck", "--log-level", "ERROR"]) == EXIT_OK
        assert main(["selfcheck", "--inject-fault", "--log-level", "ERROR"]) == EXIT_FAILED

    def test_generated_files(self, run_dir):
        _, _, out = run_dir
        for name in ("train.lpds", "test.lpds", RESOLVED_CONFIG_NAME):
            assert (out / name).exists()
        state = json.loads((out / "checkpoint" / "training.json").read_text(encoding="utf-8"))
        assert state["step"] == 4 and state["reason"] == "final"

    def test_resume_continues_training(self, run_dir, tmp_path):
        _, cfg, out = run_dir
        code = main(["train", "--config", cfg, "--out", str(tmp_path), "--dataset", str(out / "train.lpds"),
                     "--resume", str(out / "checkpoint"), "--steps", "6", "--log-level", "WARNING"])
        assert code == EXIT_OK
        state = json.loads((tmp_path / "checkpoint" / "training.json").read_text(encoding="utf-8"))
        assert state["step"] == 6

    def test_bad_config_is_usage_error(self, tmp_path, capsys):
        cfg = _write_json(tmp_path / "bad.json", {"training": {"nope": 1}})
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == EXIT_USAGE
        assert "nope" in capsys.readouterr().err

    def test_missing_model_is_usage_error(self, run_dir, tmp_path):
        root, cfg, _ = run_dir
        code = main(["plan", "--config", cfg, "--out", str(tmp_path), "--model", str(tmp_path / "absent"),
                     "--scenario", str(root / "scene.json"), "--start=-1.5,0", "--goal=1.5,0"])
        assert code == EXIT_USAGE

    def test_out_of_range_posture_is_usage_error(self, run_dir, tmp_path):
        root, cfg, out = run_dir
        code = main(["plan", "--config", cfg, "--out", str(tmp_path), "--model", str(out / "checkpoint"),
                     "--scenario", str(root / "scene.json"), "--start=4,0", "--goal=1.5,0"])
        assert code == EXIT_USAGE

    def test_colliding_start_fails(self, run_dir, tmp_path, capsys):
        root, cfg, out = run_dir
        code = main(["plan", "--config", cfg, "--out", str(tmp_path), "--model", str(out / "checkpoint"),
                     "--scenario", str(root / "scene.json"), "--start=0,0", "--goal=1.5,0"])
        assert code == EXIT_FAILED
        assert "endpoint-collision" in capsys.readouterr().err

    def test_plan_with_repair_then_render(self, run_dir, tmp_path):
        root, cfg, out = run_dir
        code = main(["plan", "--config", cfg, "--out", str(tmp_path), "--model", str(out / "checkpoint"),
                     "--scenario", str(root / "scene.json"), f"--start={-math.pi / 2},0",
                     f"--goal={math.pi / 2},0", "--optimize", "jerk", "--cag", "--log-level", "WARNING"])
        assert code == EXIT_OK
        traj, header = load_trajectory(tmp_path / "trajectory.csv")
        assert header["success"] is True
        assert traj.planner in ("latent", "latent+cag")
        assert traj.criterion == "jerk"

        svg = tmp_path / "render" / "scene.svg"
        code = main(["render", "--scenario", str(root / "scene.json"), "--trajectory",
                     str(tmp_path / "trajectory.csv"), "--output", str(svg), "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert f'id="trace-{traj.planner}"' in svg.read_text(encoding="utf-8")
        assert (svg.parent / RESOLVED_CONFIG_NAME).exists()

    def test_bench_comparison_without_model(self, run_dir, tmp_path):
        _, cfg, out = run_dir
        code = main(["bench", "--config", cfg, "--out", str(tmp_path), "--dataset", str(out / "test.lpds"),
                     "--tables", "comparison", "--log-level", "WARNING"])
        assert code == EXIT_OK
        for name in ("comparison.txt", "comparison.jsonl", "comparison_trials.jsonl"):
            assert (tmp_path / name).exists()

    def test_unknown_bench_table(self, run_dir, tmp_path):
        _, cfg, out = run_dir
        code = main(["bench", "--config", cfg, "--out", str(tmp_path), "--dataset", str(out / "test.lpds"),
                     "--tables", "comparison,histogram"])
        assert code == EXIT_USAGE

    def test_internal_errors_are_reported(self, run_dir, tmp_path):
        _, cfg, _ = run_dir
        with patch("app.generate_dataset", side_effect=RuntimeError("boom")):
            code = main(["gen-data", "--config", cfg, "--out", str(tmp_path), "--log-level", "CRITICAL"])
        assert code == EXIT_INTERNAL
