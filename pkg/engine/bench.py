"""
engine/bench.py — Banc d'essai des planificateurs
==================================================
Comparaison latent / latent+CAG / CAG seul / RRT / RRT-Connect par paire de
régions, tableau d'optimisation par critère, balayage en nombre d'obstacles
et taux de succès par modèle (convention des crochets).
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from config import (
    ArmSpec, ExperimentSpec, GridSpec, OptimizationConfig, PlannerConfig, SamplerConfig, REGIONS,
)
from data.scenario import Dataset, denormalize, sample_scenario
from data.stores import save_trajectory
from engine.cgan import ModelBundle
from engine.classical_planner import PlanningError, repair_cag, rrt, rrt_connect
from engine.geometry import CollisionChecker, Scenario, configs_checked, end_effector
from engine.latent_planner import (
    Trajectory, anchor_endpoints, metrics, plan_latent, success_check, verify_anchored,
)

logger = logging.getLogger(__name__)

_CANDIDATE_BATCH = 256
_SECTOR_CENTER = {"right": 0.0, "upper": 0.5 * np.pi, "left": np.pi, "bottom": -0.5 * np.pi}


class RegionInfeasibleError(ValueError):
    pass


class EmptyTableError(ValueError):
    pass


# ──────────────────────────────────────────────
# Départ / but
# ──────────────────────────────────────────────

class StartGoal(NamedTuple):
    theta_s: np.ndarray
    theta_g: np.ndarray
    q_s: np.ndarray
    q_g: np.ndarray


def region_of(points: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    """Secteur de 90° (centré sur les axes) contenant chaque point, vu du centroïde."""
    d = np.atleast_2d(points) - np.asarray(centroid)[None, :]
    angle = np.arctan2(d[:, 1], d[:, 0])
    names = np.array(REGIONS, dtype=object)
    centers = np.array([_SECTOR_CENTER[r] for r in REGIONS])
    gap = np.abs(np.angle(np.exp(1j * (angle[:, None] - centers[None, :]))))
    return names[np.argmin(gap, axis=1)]


def _sample_in_region(arm: ArmSpec, checker: CollisionChecker, region: str, centroid: np.ndarray,
                      margin: float, rng: np.random.Generator, max_attempts: int) -> np.ndarray:
    drawn = 0
    while drawn < max_attempts:
        k = min(_CANDIDATE_BATCH, max_attempts - drawn)
        theta = rng.random((k, arm.n_joints))
        drawn += k
        q = denormalize(arm, theta)
        out = checker.check_batch(q)
        ok = ((out["clearance"] >= margin) & ~out["colliding"] & ~out["self_colliding"]
              & (region_of(end_effector(arm, q), centroid) == region))
        hits = np.flatnonzero(ok)
        if len(hits):
            return theta[hits[0]]
    raise RegionInfeasibleError(
        f"Aucune posture libre (marge {margin}) dans la région « {region} » après {max_attempts} tirages.")


def sample_start_goal(arm: ArmSpec, scenario: Scenario, regions: tuple[str, str],
                      rng: np.random.Generator, margin: float = 0.1,
                      max_attempts: int = 10_000) -> StartGoal:
    """
    Postures normalisées de départ et de but, libres avec une clearance ≥ margin,
    effecteur dans la région demandée ; les radians sont dérivés des normalisées.
    """
    checker = CollisionChecker(arm, scenario)
    centroid = scenario.centroid(default=tuple(arm.base))
    theta_s = _sample_in_region(arm, checker, regions[0], centroid, margin, rng, max_attempts)
    theta_g = _sample_in_region(arm, checker, regions[1], centroid, margin, rng, max_attempts)
    return StartGoal(theta_s, theta_g, denormalize(arm, theta_s), denormalize(arm, theta_g))


def _condition_rng(seed: int, scenario_id: int, pair_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, scenario_id, pair_index])))


def _trial_seed(seed: int, scenario_id: int, pair_index: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, scenario_id, pair_index, trial]).generate_state(1)[0])


# ──────────────────────────────────────────────
# Essais
# ──────────────────────────────────────────────

class Job(NamedTuple):
    scenario: Scenario
    pair_index: int
    pair: tuple[str, str]
    trial: int
    start_goal: StartGoal


def _record(planner: str, job: Job, success: bool, elapsed: float, traj: Trajectory | None,
            arm: ArmSpec, checks: int = 0, reason: str = "", bracket: bool | None = None) -> dict:
    m = metrics(traj, arm) if traj is not None and traj.T >= 2 else None
    return {
        "planner": planner,
        "pair": f"{job.pair[0]}-{job.pair[1]}",
        "scenario_id": job.scenario.scenario_id,
        "trial": job.trial,
        "success": bool(success),
        "collision_free": bool(success if bracket is None else bracket),
        "time_ms": 1000.0 * elapsed,
        "joint_length": m.joint_length if m else np.nan,
        "ee_length": m.ee_length if m else np.nan,
        "waypoints": traj.T if traj is not None else 0,
        "collision_checks": int(checks),
        "reason": reason,
        "trajectory": traj,
    }


def _run_latent(bundle: ModelBundle, arm: ArmSpec, job: Job, spec: ExperimentSpec,
                planner_cfg: PlannerConfig, want: set[str]) -> list[dict]:
    sg = job.start_goal
    before = configs_checked()
    plan = plan_latent(bundle, arm, job.scenario, sg.theta_s, sg.theta_g, T=spec.path_steps)
    bare_checks = configs_checked() - before
    checker = CollisionChecker(arm, job.scenario, resolution=planner_cfg.resolution)
    verdict = success_check(arm, bundle, job.scenario, sg.theta_s, sg.theta_g, plan.trajectory,
                            eps=spec.epsilon, step=planner_cfg.resolution, checker=checker)
    rows = []
    if "latent" in want:
        rows.append(_record("latent", job, verdict.success, plan.elapsed, plan.trajectory, arm,
                            bare_checks, ",".join(verdict.reasons), bracket=verdict.collision_free))
    if not want & {"latent+cag", "cag-only"}:
        return rows

    cfg = replace(planner_cfg, seed=_trial_seed(spec.seed, job.scenario.scenario_id, job.pair_index, job.trial))
    repair_checker = CollisionChecker(arm, job.scenario, resolution=cfg.resolution)
    t0 = time.perf_counter()
    try:
        anchored = anchor_endpoints(arm, plan.trajectory, sg.theta_s, sg.theta_g)
        repaired = repair_cag(arm, job.scenario, anchored, cfg, checker=repair_checker)
        elapsed = plan.elapsed + time.perf_counter() - t0
        ok = verify_anchored(arm, job.scenario, repaired, sg.q_s, sg.q_g, cfg.resolution)
        reason = "" if ok else "collision"
    except PlanningError as exc:
        elapsed = plan.elapsed + time.perf_counter() - t0
        repaired, ok, reason = None, False, exc.reason
    if "latent+cag" in want:
        rows.append(_record("latent+cag", job, ok, elapsed, repaired, arm, repair_checker.calls, reason))
    if "cag-only" in want and not verdict.success:
        rows.append(_record("cag-only", job, ok, elapsed, repaired, arm, repair_checker.calls, reason))
    return rows


def _run_classical(name: str, arm: ArmSpec, job: Job, spec: ExperimentSpec,
                   planner_cfg: PlannerConfig) -> dict:
    sg = job.start_goal
    cfg = replace(planner_cfg, seed=_trial_seed(spec.seed, job.scenario.scenario_id, job.pair_index, job.trial))
    checker = CollisionChecker(arm, job.scenario, resolution=cfg.resolution)
    planner = rrt if name == "rrt" else rrt_connect
    t0 = time.perf_counter()
    try:
        result = planner(arm, job.scenario, sg.q_s, sg.q_g, cfg, checker=checker)
    except PlanningError as exc:
        return _record(name, job, False, time.perf_counter() - t0, None, arm, checker.calls, exc.reason)
    traj = Trajectory.from_radians(arm, result.path, planner=name)
    ok = verify_anchored(arm, job.scenario, traj, sg.q_s, sg.q_g, cfg.resolution)
    return _record(name, job, ok, result.elapsed, traj, arm, result.collision_checks,
                   "" if ok else "collision")


def _conditions(dataset: Dataset, n: int) -> list[Scenario]:
    scenarios = sorted(dataset.scenarios, key=lambda s: s.scenario_id)[:n]
    if not scenarios:
        raise EmptyTableError(f"Aucun scénario dans le split « {dataset.split} ».")
    return scenarios


def build_jobs(dataset: Dataset, spec: ExperimentSpec, trials: int | None = None) -> list[Job]:
    """Une paire départ/but par (scénario, paire de régions), répétée `trials` fois."""
    trials = spec.trials_per_condition if trials is None else trials
    jobs = []
    for scenario in _conditions(dataset, spec.n_conditions):
        for k, pair in enumerate(spec.region_pairs):
            rng = _condition_rng(spec.seed, scenario.scenario_id, k)
            try:
                sg = sample_start_goal(dataset.arm, scenario, pair, rng, spec.margin, spec.max_region_attempts)
            except RegionInfeasibleError as exc:
                logger.debug("Scénario %d, paire %s ignorée : %s", scenario.scenario_id, pair, exc)
                continue
            jobs.extend(Job(scenario, k, pair, t, sg) for t in range(trials))
    if not jobs:
        raise EmptyTableError("Aucune paire départ/but réalisable.")
    return jobs


def run_comparison(bundle: ModelBundle | None, dataset: Dataset, spec: ExperimentSpec,
                   planner_cfg: PlannerConfig | None = None,
                   traj_dir: str | Path | None = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Retourne (tableau agrégé par planificateur × paire, enregistrements par essai).
    Les enregistrements sont ordonnés par indice d'essai, quelle que soit la
    parallélisation. Avec `traj_dir`, les trajectoires réussies du premier essai
    de chaque condition y sont écrites.
    """
    if not spec.planners:
        raise EmptyTableError("Aucun planificateur demandé.")
    latent_wanted = set(spec.planners) & {"latent", "latent+cag", "cag-only"}
    if latent_wanted and bundle is None:
        raise ValueError("Un modèle entraîné est requis pour les planificateurs latents.")
    planner_cfg = planner_cfg or PlannerConfig(seed=spec.seed)
    arm = dataset.arm
    jobs = build_jobs(dataset, spec)

    def run(job: Job) -> list[dict]:
        rows = _run_latent(bundle, arm, job, spec, planner_cfg, latent_wanted) if latent_wanted else []
        for name in ("rrt", "rrt_connect"):
            if name in spec.planners:
                rows.append(_run_classical(name, arm, job, spec, planner_cfg))
        logger.debug("Essai %d/%s/%d terminé", job.scenario.scenario_id, job.pair, job.trial)
        return rows

    with ThreadPoolExecutor(max_workers=spec.workers) as pool:
        batches = list(pool.map(run, jobs))
    flat = [row for rows in batches for row in rows]
    if not flat:
        raise EmptyTableError("Aucun essai enregistré.")
    if traj_dir is not None:
        _save_trajectories(flat, arm, Path(traj_dir))
    records = pd.DataFrame(flat).drop(columns="trajectory")
    order = {name: i for i, name in enumerate(spec.planners)}
    table = summarize(records, order)
    logger.info("Comparaison : %d essais, %d lignes", len(jobs), len(table))
    return table, records


def _save_trajectories(rows: list[dict], arm: ArmSpec, out_dir: Path) -> None:
    for row in rows:
        if row["trial"] != 0 or not row["success"] or row["trajectory"] is None:
            continue
        name = f"{row['planner'].replace('+', '_')}_{row['scenario_id']}_{row['pair']}.csv"
        save_trajectory(row["trajectory"], arm, out_dir / name, scenario_id=row["scenario_id"],
                        extra={"pair": row["pair"], "success": True})


def summarize(records: pd.DataFrame, order: dict[str, int] | None = None) -> pd.DataFrame:
    """Taux de succès sur tous les essais ; temps et longueurs sur les essais réussis."""
    rows = []
    for (planner, pair), group in records.groupby(["planner", "pair"], sort=False):
        ok = group[group["success"]]
        rows.append({
            "planner": planner,
            "pair": pair,
            "trials": len(group),
            "success_rate": 100.0 * group["success"].mean(),
            "collision_free_rate": 100.0 * group["collision_free"].mean(),
            "time_ms_mean": ok["time_ms"].mean(),
            "time_ms_sd": ok["time_ms"].std(ddof=0),
            "joint_length": ok["joint_length"].mean(),
            "ee_length": ok["ee_length"].mean(),
        })
    table = pd.DataFrame(rows)
    if order and len(table):
        table = (table.assign(_rank=table["planner"].map(order))
                 .sort_values(["_rank", "pair"], kind="stable").drop(columns="_rank").reset_index(drop=True))
    return table


# ──────────────────────────────────────────────
# Taux de succès par modèle (convention des crochets)
# ──────────────────────────────────────────────

def run_success_table(bundles: dict[str, ModelBundle], dataset: Dataset, spec: ExperimentSpec,
                      resolution: float | None = None) -> pd.DataFrame:
    """
    Succès du planificateur latent brut, une fois par paire départ/but.
    `bracket_rate` compte aussi les chemins sans collision dont la reconstruction
    d'une extrémité échoue.
    """
    if not bundles:
        raise EmptyTableError("Aucun modèle à évaluer.")
    jobs = build_jobs(dataset, spec, trials=1)
    step = resolution or PlannerConfig().resolution
    rows = []
    for name, bundle in bundles.items():
        success = free = 0
        for job in jobs:
            sg = job.start_goal
            plan = plan_latent(bundle, dataset.arm, job.scenario, sg.theta_s, sg.theta_g, T=spec.path_steps)
            verdict = success_check(dataset.arm, bundle, job.scenario, sg.theta_s, sg.theta_g,
                                    plan.trajectory, eps=spec.epsilon, step=step)
            success += verdict.success
            free += verdict.collision_free
        rows.append({"model": name, "split": dataset.split, "trials": len(jobs),
                     "success_rate": 100.0 * success / len(jobs),
                     "bracket_rate": 100.0 * free / len(jobs)})
        logger.info("Modèle %s : %.1f %% (%.1f %%)", name, rows[-1]["success_rate"], rows[-1]["bracket_rate"])
    return pd.DataFrame(rows)


# ──────────────────────────────────────────────
# Tableau d'optimisation
# ──────────────────────────────────────────────

def run_optimization_table(bundle: ModelBundle, dataset: Dataset, spec: ExperimentSpec,
                           opt_cfg: OptimizationConfig | None = None,
                           resolution: float | None = None) -> pd.DataFrame:
    """
    Moyenne ± écart-type de Σ‖v‖², Σ‖a‖², Σ‖j‖² par critère, sur les paires
    départ/but réussies avant et après optimisation pour tous les critères.
    """
    opt_cfg = opt_cfg or OptimizationConfig()
    step = resolution or PlannerConfig().resolution
    arm = dataset.arm
    per_case: list[dict[str, tuple[float, float, float]]] = []
    for job in build_jobs(dataset, spec, trials=1):
        sg = job.start_goal
        found = {}
        for criterion in spec.criteria:
            cfg = None if criterion == "none" else replace(opt_cfg, criterion=criterion)
            plan = plan_latent(bundle, arm, job.scenario, sg.theta_s, sg.theta_g, T=spec.path_steps, opt_cfg=cfg)
            verdict = success_check(arm, bundle, job.scenario, sg.theta_s, sg.theta_g, plan.trajectory,
                                    eps=spec.epsilon, step=step)
            if not verdict.success:
                break
            m = metrics(plan.trajectory, arm)
            found[criterion] = (m.sum_v2, m.sum_a2, m.sum_j2)
        if len(found) == len(spec.criteria):
            per_case.append(found)

    if not per_case:
        raise EmptyTableError("Aucune trajectoire réussie pour tous les critères.")
    rows = []
    for criterion in spec.criteria:
        values = np.array([case[criterion] for case in per_case])
        rows.append({
            "criterion": criterion, "n": len(values),
            "sum_v2_mean": values[:, 0].mean(), "sum_v2_sd": values[:, 0].std(),
            "sum_a2_mean": values[:, 1].mean(), "sum_a2_sd": values[:, 1].std(),
            "sum_j2_mean": values[:, 2].mean(), "sum_j2_sd": values[:, 2].std(),
        })
    return pd.DataFrame(rows)


# ──────────────────────────────────────────────
# Balayage en nombre d'obstacles
# ──────────────────────────────────────────────

def sweep_scenarios(sampler: SamplerConfig, arm: ArmSpec, grid: GridSpec, n_obstacles: int,
                    count: int, seed: int) -> list[Scenario]:
    out = []
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2, n_obstacles, i])))
        out.append(sample_scenario(sampler, arm, grid, i, rng, n_obstacles=n_obstacles))
    return out


def run_scalability_sweep(bundle: ModelBundle, arm: ArmSpec, grid: GridSpec, sampler: SamplerConfig,
                          spec: ExperimentSpec, planner_cfg: PlannerConfig | None = None) -> pd.DataFrame:
    """
    Temps de planification du latent brut et de RRT-Connect selon le nombre
    d'obstacles, départ/but dans la paire de régions `spec.sweep_pair`.
    """
    planner_cfg = planner_cfg or PlannerConfig(seed=spec.seed)
    rows = []
    for n_obs in spec.obstacle_counts:
        latent_ms, latent_checks, rrtc_ms, rrtc_checks = [], 0, [], []
        for scenario in sweep_scenarios(sampler, arm, grid, n_obs, spec.sweep_conditions, spec.seed):
            rng = _condition_rng(spec.seed, 10_000 * n_obs + scenario.scenario_id, 0)
            try:
                sg = sample_start_goal(arm, scenario, spec.sweep_pair, rng, spec.margin, spec.max_region_attempts)
            except RegionInfeasibleError:
                continue
            before = configs_checked()
            plan = plan_latent(bundle, arm, scenario, sg.theta_s, sg.theta_g, T=spec.path_steps)
            latent_ms.append(1000.0 * plan.elapsed)
            latent_checks += configs_checked() - before

            cfg = replace(planner_cfg, seed=_trial_seed(spec.seed, scenario.scenario_id, n_obs, 0))
            checker = CollisionChecker(arm, scenario, resolution=cfg.resolution)
            try:
                result = rrt_connect(arm, scenario, sg.q_s, sg.q_g, cfg, checker=checker)
                rrtc_ms.append(1000.0 * result.elapsed)
                rrtc_checks.append(result.collision_checks)
            except PlanningError as exc:
                logger.debug("Balayage : rrt_connect en échec (%s)", exc.reason)
        rows.append({
            "n_obstacles": n_obs,
            "conditions": len(latent_ms),
            "latent_ms_mean": float(np.mean(latent_ms)) if latent_ms else np.nan,
            "latent_ms_median": float(np.median(latent_ms)) if latent_ms else np.nan,
            "latent_checks": latent_checks,
            "rrt_connect_ms_mean": float(np.mean(rrtc_ms)) if rrtc_ms else np.nan,
            "rrt_connect_ms_median": float(np.median(rrtc_ms)) if rrtc_ms else np.nan,
            "rrt_connect_checks_mean": float(np.mean(rrtc_checks)) if rrtc_checks else np.nan,
        })
    table = pd.DataFrame(rows)
    if len(table):
        table["latent_ratio"] = table["latent_ms_mean"] / table["latent_ms_mean"].iloc[0]
        table["rrt_connect_ratio"] = table["rrt_connect_ms_median"] / table["rrt_connect_ms_median"].iloc[0]
    return table


# ──────────────────────────────────────────────
# Rapport
# ──────────────────────────────────────────────

def write_report(tables: dict[str, pd.DataFrame], out_dir: str | Path) -> list[Path]:
    """Par tableau : texte aligné (<nom>.txt) et enregistrements JSON ligne à ligne (<nom>.jsonl)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in tables.items():
        text = out / f"{name}.txt"
        text.write_text(table.to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n", encoding="utf-8")
        lines = out / f"{name}.jsonl"
        table.to_json(lines, orient="records", lines=True)
        written.extend((text, lines))
    return written
