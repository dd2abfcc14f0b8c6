"""
Planificateur latent pour bras plan
====================================
Génère les jeux de données, entraîne le cGAN, planifie dans l'espace latent
(avec réparation CAG optionnelle), compare aux planificateurs RRT et produit
les rapports du banc d'essai.

Installation :
    pip install -r requirements.txt

Lancement :
    python app.py gen-data --out runs/demo
    python app.py train --out runs/demo --steps 500
    python app.py plan --model runs/demo/checkpoint --dataset runs/demo/test.lpds \\
        --scenario-id 200 --start=-1.2,0.4 --goal=1.1,-0.3 --cag
    python app.py bench --model runs/demo/checkpoint --out runs/demo/bench
    python app.py selfcheck

Codes de sortie : 0 succès, 1 échec prévu (plan, divergence, auto-vérification),
2 erreur d'usage ou de configuration, 3 erreur interne.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from config import CRITERIA, ConfigError, OptimizationConfig, RunConfig, load_run_config, write_resolved
from data.checkpoint import checkpoint_fn, load_bundle, load_checkpoint, save_checkpoint
from data.scenario import Dataset, JointRangeError, denormalize, generate_dataset, normalize
from data.stores import (
    StoreFormatError, load_dataset, load_scenario, load_trajectory, save_dataset, save_trajectory,
)
from engine.bench import (
    run_comparison, run_optimization_table, run_scalability_sweep, run_success_table, write_report,
)
from engine.cgan import TrainingDivergedError, init_training_state, train
from engine.classical_planner import EndpointCollisionError, PlanningError, repair_cag
from engine.geometry import CollisionChecker, Scenario
from engine.latent_planner import (
    anchor_endpoints, metrics, plan_latent, success_check, verify_anchored,
)
from engine.selfcheck import run_selfcheck
from ui.svg import render_svg

logger = logging.getLogger("app")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3
TRAIN_FILE = "train.lpds"
TEST_FILE = "test.lpds"
CHECKPOINT_DIR = "checkpoint"
BENCH_TABLES = ("comparison", "optimization", "sweep", "success")


# ──────────────────────────────────────────────
# Utilitaires
# ──────────────────────────────────────────────

def _resolve(args, **sections) -> RunConfig:
    overrides: dict = {"output_dir": args.out, "seed": args.seed}
    for section, values in sections.items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            overrides[section] = values
    return load_run_config(args.config, overrides)


def _posture(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"Posture invalide « {text} » (attendu : a1,a2,…)") from exc


def _load_scenario(args) -> Scenario:
    if args.scenario:
        return load_scenario(args.scenario)
    if args.dataset and args.scenario_id is not None:
        return load_dataset(args.dataset).scenario(args.scenario_id)
    raise ConfigError("Scénario requis : --scenario FICHIER ou --dataset FICHIER --scenario-id N.")


def _print_table(title: str, table: pd.DataFrame) -> None:
    print(f"\n── {title} ──")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))


# ──────────────────────────────────────────────
# Commandes
# ──────────────────────────────────────────────

def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.output_dir)
    write_resolved(cfg, out)
    summaries = []
    for split, name in (("train", TRAIN_FILE), ("test", TEST_FILE)):
        ds = generate_dataset(cfg.arm, cfg.sampler, cfg.grid, split)
        save_dataset(ds, out / name)
        summaries.append(ds.summary(cfg.training.clearance_threshold))
    _print_table("Jeux de données", pd.DataFrame(summaries))
    return EXIT_OK


def cmd_train(args) -> int:
    training = {"steps": args.steps, "lr_d": args.lr, "lr_ge": args.lr,
                "use_map": False if args.no_map else None, "use_col": False if args.no_col else None}
    cfg = _resolve(args, training=training)
    out = Path(cfg.output_dir)
    write_resolved(cfg, out)
    dataset = load_dataset(args.dataset or out / TRAIN_FILE)

    train_cfg = cfg.training
    if args.resume:
        state, ckpt_cfg = load_checkpoint(args.resume, cfg.architecture)
        train_cfg = replace(ckpt_cfg, steps=cfg.training.steps)
        logger.info("Reprise à l'étape %d depuis %s", state.step, args.resume)
    else:
        state = init_training_state(dataset, train_cfg, cfg.architecture)

    try:
        train(dataset, train_cfg, cfg.architecture, state=state, checkpoint_fn=checkpoint_fn(out, train_cfg))
    except TrainingDivergedError as exc:
        print(f"Entraînement interrompu : {exc}", file=sys.stderr)
        return EXIT_FAILED
    save_checkpoint(state, train_cfg, out / CHECKPOINT_DIR, reason="final")
    if len(state.log):
        _print_table("Dernières pertes", state.log.to_frame().tail(1))
    return EXIT_OK


def cmd_plan(args) -> int:
    optimization = {"criterion": args.optimize} if args.optimize else {}
    cfg = _resolve(args, optimization=optimization, experiment={"path_steps": args.steps, "epsilon": args.eps})
    out = Path(cfg.output_dir)
    write_resolved(cfg, out)
    arm, spec = cfg.arm, cfg.experiment
    scenario = _load_scenario(args)
    bundle = load_bundle(args.model)

    theta_s, theta_g = normalize(arm, args.start), normalize(arm, args.goal)
    checker = CollisionChecker(arm, scenario, resolution=cfg.planner.resolution)
    for label, q in (("départ", args.start), ("but", args.goal)):
        if not checker.is_free(q):
            raise EndpointCollisionError(f"Posture de {label} en collision.")

    opt_cfg: OptimizationConfig | None = cfg.optimization if args.optimize else None
    plan = plan_latent(bundle, arm, scenario, theta_s, theta_g, T=spec.path_steps, opt_cfg=opt_cfg)
    traj = plan.trajectory
    if args.cag:
        traj = repair_cag(arm, scenario, anchor_endpoints(arm, traj, theta_s, theta_g), cfg.planner)
        success = verify_anchored(arm, scenario, traj, denormalize(arm, theta_s), denormalize(arm, theta_g),
                                  cfg.planner.resolution)
        reasons = () if success else ("collision",)
    else:
        verdict = success_check(arm, bundle, scenario, theta_s, theta_g, traj, eps=spec.epsilon,
                                step=cfg.planner.resolution)
        success, reasons = verdict.success, verdict.reasons

    target = save_trajectory(traj, arm, out / "trajectory.csv", scenario_id=scenario.scenario_id,
                             extra={"success": bool(success), "reasons": list(reasons)})
    m = metrics(traj, arm)
    print(f"Trajectoire : {target} ({traj.T} waypoints, {1000 * plan.elapsed:.2f} ms)")
    print(f"Σ‖v‖²={m.sum_v2:.6f}  Σ‖a‖²={m.sum_a2:.6f}  Σ‖j‖²={m.sum_j2:.6f}  "
          f"longueur articulaire={m.joint_length:.4f}  effecteur={m.ee_length:.4f}")
    print("Verdict : " + ("SUCCÈS" if success else "ÉCHEC (" + ", ".join(reasons) + ")"))
    return EXIT_OK if success else EXIT_FAILED


def cmd_bench(args) -> int:
    cfg = _resolve(args, experiment={"workers": args.workers})
    out = Path(cfg.output_dir)
    write_resolved(cfg, out)
    spec = cfg.experiment
    dataset: Dataset = load_dataset(args.dataset or out / (TEST_FILE if spec.split == "test" else TRAIN_FILE))
    bundle = load_bundle(args.model) if args.model else None
    wanted = args.tables.split(",") if args.tables else list(BENCH_TABLES)
    unknown = set(wanted) - set(BENCH_TABLES)
    if unknown:
        raise ConfigError(f"Tableaux inconnus : {sorted(unknown)}.")

    tables: dict[str, pd.DataFrame] = {}
    if "comparison" in wanted:
        tables["comparison"], tables["comparison_trials"] = run_comparison(
            bundle, dataset, spec, cfg.planner, traj_dir=out / "trajectories")
    if bundle is not None and "optimization" in wanted:
        tables["optimization"] = run_optimization_table(bundle, dataset, spec, cfg.optimization,
                                                        cfg.planner.resolution)
    if bundle is not None and "sweep" in wanted:
        tables["sweep"] = run_scalability_sweep(bundle, cfg.arm, cfg.grid, cfg.sampler, spec, cfg.planner)
    if bundle is not None and "success" in wanted:
        models = {"full": bundle}
        for item in args.ablation or []:
            name, _, path = item.partition("=")
            models[name] = load_bundle(path)
        tables["success"] = run_success_table(models, dataset, spec, cfg.planner.resolution)

    write_report(tables, out)
    for name, table in tables.items():
        if name != "comparison_trials":
            _print_table(name, table)
    return EXIT_OK


def cmd_render(args) -> int:
    scenario = _load_scenario(args)
    cfg = _resolve(args)
    trajectories = {}
    for path in args.trajectory or []:
        traj, header = load_trajectory(path)
        trajectories[header.get("planner", Path(path).stem)] = traj
    target = render_svg(cfg.arm, scenario, trajectories, args.output, poses=args.poses)
    write_resolved(cfg, Path(target).parent)
    print(f"Scène : {target}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(seed=args.seed or 0, inject_fault=args.inject_fault)
    table = pd.DataFrame([{"suite": r.name, "ok": r.passed, "secondes": r.seconds, "détail": r.detail}
                          for r in results])
    _print_table("Auto-vérifications", table)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


# ──────────────────────────────────────────────
# Analyse des arguments
# ──────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Fichier JSON de configuration")
    common.add_argument("--out", help="Dossier de sortie (prioritaire sur la variable d'environnement)")
    common.add_argument("--seed", type=int, help="Graine maîtresse")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="app.py", description="Planificateur latent sans collision")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Génère les jeux train et test")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="Entraîne G, D et E")
    p.add_argument("--dataset", help="Jeu d'entraînement (défaut : <out>/train.lpds)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float, help="Taux d'apprentissage de D et de G/E")
    p.add_argument("--no-map", action="store_true", help="Sans L_map")
    p.add_argument("--no-col", action="store_true", help="Sans L_col")
    p.add_argument("--resume", help="Dossier de checkpoint à reprendre")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", parents=[common], help="Planifie une trajectoire")
    p.add_argument("--model", required=True, help="Dossier de checkpoint")
    p.add_argument("--scenario", help="Fichier JSON de scénario")
    p.add_argument("--dataset")
    p.add_argument("--scenario-id", type=int)
    p.add_argument("--start", type=_posture, required=True, help="Angles en radians : a1,a2")
    p.add_argument("--goal", type=_posture, required=True)
    p.add_argument("--optimize", choices=CRITERIA)
    p.add_argument("--cag", action="store_true", help="Réparation des segments en collision")
    p.add_argument("--steps", type=int, help="Nombre de waypoints T")
    p.add_argument("--eps", type=float, help="Tolérance de reconstruction ε")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("bench", parents=[common], help="Banc d'essai et rapports")
    p.add_argument("--model", help="Dossier de checkpoint (requis pour les planificateurs latents)")
    p.add_argument("--dataset", help="Jeu évalué (défaut : <out>/test.lpds)")
    p.add_argument("--tables", help=f"Sous-ensemble de {','.join(BENCH_TABLES)}")
    p.add_argument("--ablation", action="append", metavar="NOM=CHECKPOINT",
                   help="Modèle supplémentaire pour le tableau de succès")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", parents=[common], help="Rendu SVG d'une scène")
    p.add_argument("--scenario")
    p.add_argument("--dataset")
    p.add_argument("--scenario-id", type=int)
    p.add_argument("--trajectory", action="append", help="Fichier de trajectoire (répétable)")
    p.add_argument("--poses", type=int, default=5)
    p.add_argument("--output", required=True, help="Fichier SVG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("selfcheck", parents=[common], help="Auto-vérifications")
    p.add_argument("--inject-fault", action="store_true", help="Fausse un gradient analytique")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s : %(message)s")
    try:
        return args.func(args)
    except PlanningError as exc:
        print(f"Échec de planification [{exc.reason}] : {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ConfigError, JointRangeError, StoreFormatError, FileNotFoundError, KeyError) as exc:
        print(f"Erreur : {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:  # noqa: BLE001
        logger.exception("Erreur interne")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
