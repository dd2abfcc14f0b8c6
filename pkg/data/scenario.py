"""
data/scenario.py — Échantillonnage des scénarios d'obstacles et des postures étiquetées
=======================================================================================
Générateur : PCG64, une sous-graine par (seed, split, identifiant de scénario)
via numpy.random.SeedSequence. Deux exécutions de même graine produisent
des jeux de données identiques au bit près.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from config import (
    ArmSpec, GridSpec, SamplerConfig,
    BASE_CLEARANCE, CLEARANCE_THRESHOLD, GENERATOR_NAME,
)
from engine.geometry import CircleObstacle, Scenario, check_configs

logger = logging.getLogger(__name__)

SPLIT_CODES = {"train": 0, "test": 1}
CLEARANCE_ATOL = 1e-12  # recalcul vectorisé sur un sous-lot


class JointRangeError(ValueError):
    """Angle hors de [joint_min, joint_max] ou valeur normalisée hors de [0, 1]."""


class ScenarioSamplingError(ValueError):
    """Rejet impossible : aucun obstacle admissible après le nombre d'essais maximal."""


# ──────────────────────────────────────────────
# Normalisation min-max
# ──────────────────────────────────────────────

def normalize(arm: ArmSpec, q) -> np.ndarray:
    """Radians → [0, 1]ⁿ, articulation par articulation."""
    q = np.asarray(q, dtype=np.float64)
    lo = np.asarray(arm.joint_min, dtype=np.float64)
    hi = np.asarray(arm.joint_max, dtype=np.float64)
    if q.shape[-1] != arm.n_joints:
        raise JointRangeError(f"Dimension {q.shape[-1]} ≠ {arm.n_joints} articulations.")
    if np.any(q < lo) or np.any(q > hi) or not np.all(np.isfinite(q)):
        raise JointRangeError("Angle articulaire hors des bornes du bras.")
    return (q - lo) / (hi - lo)


def denormalize(arm: ArmSpec, q_hat) -> np.ndarray:
    """[0, 1]ⁿ → radians."""
    q_hat = np.asarray(q_hat, dtype=np.float64)
    if q_hat.shape[-1] != arm.n_joints:
        raise JointRangeError(f"Dimension {q_hat.shape[-1]} ≠ {arm.n_joints} articulations.")
    if np.any(q_hat < 0.0) or np.any(q_hat > 1.0) or not np.all(np.isfinite(q_hat)):
        raise JointRangeError("Coordonnée normalisée hors de [0, 1].")
    lo = np.asarray(arm.joint_min, dtype=np.float64)
    hi = np.asarray(arm.joint_max, dtype=np.float64)
    return lo + q_hat * (hi - lo)


# ──────────────────────────────────────────────
# Générateurs
# ──────────────────────────────────────────────

def scenario_seed(seed: int, split: str, scenario_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, SPLIT_CODES[split], scenario_id])


def scenario_rngs(seed: int, split: str, scenario_id: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(rng obstacles, rng postures) indépendants pour un scénario."""
    obs_ss, post_ss = scenario_seed(seed, split, scenario_id).spawn(2)
    return np.random.Generator(np.random.PCG64(obs_ss)), np.random.Generator(np.random.PCG64(post_ss))


def scenario_ids(cfg: SamplerConfig, split: str) -> range:
    """Identifiants train puis test, consécutifs et disjoints."""
    if split == "train":
        return range(cfg.n_scenarios_train)
    return range(cfg.n_scenarios_train, cfg.n_scenarios_train + cfg.n_scenarios_test)


# ──────────────────────────────────────────────
# Scénarios
# ──────────────────────────────────────────────

def _sample_circle(cfg: SamplerConfig, base: np.ndarray, rng: np.random.Generator) -> CircleObstacle:
    a0, a1 = cfg.center_annulus
    for attempt in range(cfg.max_retries):
        radius = rng.uniform(*cfg.radius_range)
        # Uniforme en aire dans l'anneau
        rho = math.sqrt(rng.uniform(a0 * a0, a1 * a1))
        phi = rng.uniform(0.0, 2.0 * math.pi)
        center = base + rho * np.array([math.cos(phi), math.sin(phi)])
        if float(np.linalg.norm(center - base)) - radius >= BASE_CLEARANCE:
            if attempt:
                logger.debug("Obstacle accepté après %d rejet(s)", attempt)
            return CircleObstacle(center=(center[0], center[1]), radius=radius)
    raise ScenarioSamplingError(
        f"Aucun obstacle à plus de {BASE_CLEARANCE} de la base après {cfg.max_retries} essais "
        f"(anneau {cfg.center_annulus}, rayons {cfg.radius_range}).")


def sample_scenario(cfg: SamplerConfig, arm: ArmSpec, grid_spec: GridSpec,
                    scenario_id: int, rng: np.random.Generator,
                    n_obstacles: int | None = None) -> Scenario:
    if n_obstacles is None:
        lo, hi = cfg.obstacle_count_range
        n_obstacles = int(rng.integers(lo, hi + 1))
    base = np.asarray(arm.base, dtype=np.float64)
    obstacles = [_sample_circle(cfg, base, rng) for _ in range(n_obstacles)]
    return Scenario.build(obstacles, grid_spec, scenario_id=scenario_id)


def sample_scenarios(cfg: SamplerConfig, arm: ArmSpec | None = None,
                     grid_spec: GridSpec | None = None, split: str = "train") -> list[Scenario]:
    """Scénarios d'un split, chacun tiré de sa propre sous-graine."""
    arm = arm or ArmSpec()
    grid_spec = grid_spec or GridSpec()
    scenarios = []
    for sid in scenario_ids(cfg, split):
        obs_rng, _ = scenario_rngs(cfg.seed, split, sid)
        scenarios.append(sample_scenario(cfg, arm, grid_spec, sid, obs_rng))
    return scenarios


# ──────────────────────────────────────────────
# Postures étiquetées
# ──────────────────────────────────────────────

def sample_columns(arm: ArmSpec) -> list[str]:
    return (["scenario_id"] + [f"q{i}" for i in range(arm.n_joints)]
            + ["colliding", "self_colliding", "clearance"])


def frame_from_matrix(arm: ArmSpec, matrix: np.ndarray) -> pd.DataFrame:
    """Table d'échantillons depuis une matrice (N, n+4) de float64."""
    n = arm.n_joints
    frame = pd.DataFrame(matrix[:, 1:1 + n], columns=[f"q{i}" for i in range(n)])
    frame.insert(0, "scenario_id", matrix[:, 0].astype(np.int64))
    frame["colliding"] = matrix[:, 1 + n] != 0.0
    frame["self_colliding"] = matrix[:, 2 + n] != 0.0
    frame["clearance"] = matrix[:, 3 + n]
    return frame


def frame_to_matrix(arm: ArmSpec, frame: pd.DataFrame) -> np.ndarray:
    return frame[sample_columns(arm)].to_numpy(dtype=np.float64).reshape(-1, arm.n_joints + 4)


def label_postures(arm: ArmSpec, scenario: Scenario, q_hat: np.ndarray) -> pd.DataFrame:
    labels = check_configs(arm, scenario, denormalize(arm, q_hat))
    frame = pd.DataFrame(q_hat, columns=[f"q{i}" for i in range(arm.n_joints)])
    frame.insert(0, "scenario_id", np.full(len(q_hat), scenario.scenario_id, dtype=np.int64))
    frame["colliding"] = labels["colliding"]
    frame["self_colliding"] = labels["self_colliding"]
    frame["clearance"] = labels["clearance"]
    return frame


def sample_postures(arm: ArmSpec, scenario: Scenario, k: int,
                    rng: np.random.Generator) -> pd.DataFrame:
    """k postures uniformes dans les bornes articulaires, étiquetées par check_configs."""
    if k < 1:
        raise ValueError(f"k doit être ≥ 1 (reçu {k}).")
    q_hat = rng.random((k, arm.n_joints))
    return label_postures(arm, scenario, q_hat)


# ──────────────────────────────────────────────
# Dataset
# ──────────────────────────────────────────────

@dataclass(eq=False)
class Dataset:
    arm: ArmSpec
    sampler: SamplerConfig
    grid_spec: GridSpec
    split: str
    scenarios: list[Scenario]
    samples: pd.DataFrame
    generator: str = GENERATOR_NAME
    _by_id: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self._by_id = {s.scenario_id: s for s in self.scenarios}

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def scenario_ids(self) -> set[int]:
        return set(self._by_id)

    def scenario(self, scenario_id: int) -> Scenario:
        try:
            return self._by_id[scenario_id]
        except KeyError:
            raise KeyError(f"Scénario {scenario_id} absent du split « {self.split} ».") from None

    def q_normalized(self) -> np.ndarray:
        return self.samples[[f"q{i}" for i in range(self.arm.n_joints)]].to_numpy(dtype=np.float64)

    def invalid_mask(self) -> np.ndarray:
        """Collision avec un obstacle ou auto-collision."""
        return (self.samples["colliding"] | self.samples["self_colliding"]).to_numpy()

    def conditions(self) -> np.ndarray:
        """Condition c de chaque échantillon (N, width·height)."""
        grids = np.stack([s.condition for s in self.scenarios])
        index = {s.scenario_id: i for i, s in enumerate(self.scenarios)}
        rows = self.samples["scenario_id"].map(index).to_numpy()
        return grids[rows]

    def summary(self, clearance_threshold: float = CLEARANCE_THRESHOLD) -> dict:
        s = self.samples
        n = len(s)
        if n == 0:
            return {"split": self.split, "n_scenarios": len(self.scenarios), "n_samples": 0}
        clearance = s["clearance"]
        band = (clearance >= 0.0) & (clearance < clearance_threshold)
        return {
            "split": self.split,
            "n_scenarios": len(self.scenarios),
            "n_samples": n,
            "collision_fraction": float(self.invalid_mask().mean()),
            "obstacle_fraction": float(s["colliding"].mean()),
            "self_collision_fraction": float(s["self_colliding"].mean()),
            "band_fraction": float(band.mean()),
        }


def generate_dataset(arm: ArmSpec, cfg: SamplerConfig, grid_spec: GridSpec,
                     split: str) -> Dataset:
    scenarios, frames = [], []
    for sid in scenario_ids(cfg, split):
        obs_rng, post_rng = scenario_rngs(cfg.seed, split, sid)
        scenario = sample_scenario(cfg, arm, grid_spec, sid, obs_rng)
        scenarios.append(scenario)
        frames.append(sample_postures(arm, scenario, cfg.samples_per_scenario, post_rng))
    samples = (pd.concat(frames, ignore_index=True) if frames
               else frame_from_matrix(arm, np.zeros((0, arm.n_joints + 4))))
    ds = Dataset(arm=arm, sampler=cfg, grid_spec=grid_spec, split=split,
                 scenarios=scenarios, samples=samples)
    logger.info("Jeu « %s » : %d scénarios, %d postures", split, len(scenarios), len(samples))
    return ds


def generate_datasets(arm: ArmSpec, cfg: SamplerConfig,
                      grid_spec: GridSpec) -> tuple[Dataset, Dataset]:
    return (generate_dataset(arm, cfg, grid_spec, "train"),
            generate_dataset(arm, cfg, grid_spec, "test"))


def spot_check(ds: Dataset, fraction: float = 0.01,
               rng: np.random.Generator | None = None) -> int:
    """
    Ré-étiquette une fraction des échantillons et retourne le nombre de désaccords.
    Au moins un échantillon est vérifié si le jeu n'est pas vide.
    """
    n = len(ds.samples)
    if n == 0:
        return 0
    rng = rng or np.random.Generator(np.random.PCG64(ds.sampler.seed))
    k = max(1, int(round(fraction * n)))
    rows = np.sort(rng.choice(n, size=k, replace=False))
    picked = ds.samples.iloc[rows]
    q_hat = picked[[f"q{i}" for i in range(ds.arm.n_joints)]].to_numpy(dtype=np.float64)
    mismatches = 0
    for sid, group in picked.groupby("scenario_id", sort=True):
        idx = np.flatnonzero(picked["scenario_id"].to_numpy() == sid)
        fresh = check_configs(ds.arm, ds.scenario(int(sid)), denormalize(ds.arm, q_hat[idx]))
        mismatches += int(np.sum(fresh["colliding"] != group["colliding"].to_numpy(dtype=bool)))
        mismatches += int(np.sum(fresh["self_colliding"] != group["self_colliding"].to_numpy(dtype=bool)))
        mismatches += int(np.sum(~np.isclose(fresh["clearance"], group["clearance"].to_numpy(dtype=np.float64),
                                             rtol=0.0, atol=CLEARANCE_ATOL)))
    return mismatches
