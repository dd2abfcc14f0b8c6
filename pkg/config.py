"""
config.py — Constantes par défaut et dataclasses de configuration
==================================================================
Valeurs « desk-scale » : bras plan à 2 segments, grille d'occupation 16×16,
poids λ de l'objectif cGAN, hyper-paramètres d'optimisation latente,
des planificateurs RRT et du banc d'essai.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Configuration invalide ou impossible à résoudre."""


# ──────────────────────────────────────────────
# Bras & espace de travail
# ──────────────────────────────────────────────

LINK_LENGTHS = (1.0, 1.0)
JOINT_MIN = (-math.pi, -math.pi)
JOINT_MAX = (math.pi, math.pi)
ARM_BASE = (0.0, 0.0)

# Portée 2.0 + 10 % de marge
WORKSPACE_BOUNDS = (-2.2, 2.2, -2.2, 2.2)
GRID_WIDTH = 16
GRID_HEIGHT = 16

# Sentinelle finie : l'arithmétique sur la clearance reste totale
CLEARANCE_SENTINEL = 1e9


# ──────────────────────────────────────────────
# Échantillonnage des scénarios & postures
# ──────────────────────────────────────────────

SEED = 0
N_SCENARIOS_TRAIN = 200
N_SCENARIOS_TEST = 50
SAMPLES_PER_SCENARIO = 250
OBSTACLE_COUNT_RANGE = (2, 4)
RADIUS_RANGE = (0.25, 0.45)
CENTER_ANNULUS = (0.6, 1.6)
BASE_CLEARANCE = 0.1
MAX_SAMPLING_RETRIES = 1000
GENERATOR_NAME = "PCG64"


# ──────────────────────────────────────────────
# Réseaux (G, D, E + extracteurs de condition)
# ──────────────────────────────────────────────

LEAKY_SLOPE = 0.2
HIDDEN_WIDTH = 256
HIDDEN_LAYERS = 6
EXTRACTOR_WIDTH = 128
GATE_LAYERS = (3, 4, 5)  # couches cachées (indexées à partir de 1) multipliées par une porte


# ──────────────────────────────────────────────
# Objectif cGAN & entraînement
# ──────────────────────────────────────────────

LAMBDA_GAN = 1.0
LAMBDA_REC = 100.0
LAMBDA_MAP = 10.0
LAMBDA_COL = 100.0
LAMBDA_COL_BOOST = 1000.0
CLEARANCE_THRESHOLD = 0.2  # 10 cm sur ~1 m de portée → 0.2 sur 2.0
PROB_EPS = 1e-7

BATCH_SIZE = 256
LR_D = 1e-4
LR_GE = 1e-4
ADAM_BETA1 = 0.5
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
TRAIN_STEPS = 100_000
LOG_INTERVAL = 500
CHECKPOINT_INTERVAL = 5_000
DIVERGENCE_LIMIT = 1e8


# ──────────────────────────────────────────────
# Planification dans l'espace latent
# ──────────────────────────────────────────────

PATH_STEPS = 200
OPT_ITERATIONS = 1000
OPT_LR = 1e-3
MIX_ALPHA = 0.5
MIX_BETA = 0.5
SUCCESS_EPSILON = 0.1  # ε = 5 cm sur ~1 m → 0.1 sur 2.0

CRITERIA = ("velocity", "acceleration", "jerk", "mixed")


# ──────────────────────────────────────────────
# Planificateurs classiques (RRT / RRT-Connect / CAG)
# ──────────────────────────────────────────────

RRT_STEP = 0.1
GOAL_BIAS = 0.05
MAX_ITERATIONS = 50_000
PLANNER_TIMEOUT = 60.0
EDGE_RESOLUTION = 0.05
SHORTCUT_TRIALS = 100
REPAIR_MARGIN = 1


# ──────────────────────────────────────────────
# Banc d'essai
# ──────────────────────────────────────────────

REGIONS = ("left", "upper", "bottom", "right")
REGION_PAIRS = (
    ("left", "upper"), ("left", "bottom"), ("left", "right"),
    ("upper", "bottom"), ("upper", "right"), ("bottom", "right"),
)
START_GOAL_MARGIN = 0.1
TRIALS_PER_CONDITION = 3
PLANNERS = ("latent", "latent+cag", "cag-only", "rrt", "rrt_connect")
BENCH_CRITERIA = ("none", "velocity", "acceleration", "jerk", "mixed")
SWEEP_OBSTACLE_COUNTS = (1, 2, 3, 4, 5)
MAX_REGION_ATTEMPTS = 10_000

OUTPUT_ENV_VAR = "LATENT_PLANNER_OUT"
DEFAULT_OUTPUT_DIR = "runs"
RESOLVED_CONFIG_NAME = "config.resolved.json"


# ──────────────────────────────────────────────
# Dataclasses de configuration
# ──────────────────────────────────────────────

def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _check_range(name: str, pair: tuple, *, positive: bool = False) -> None:
    _check(len(pair) == 2, f"{name} doit contenir exactement 2 valeurs.")
    lo, hi = pair
    _check(lo <= hi, f"{name} vide : [{lo}, {hi}].")
    if positive:
        _check(lo > 0, f"{name} doit être strictement positif.")


@dataclass(frozen=True)
class ArmSpec:
    """Bras plan à N segments ; angles en radians, base dans le plan."""
    link_lengths: tuple[float, ...] = LINK_LENGTHS
    joint_min: tuple[float, ...] = JOINT_MIN
    joint_max: tuple[float, ...] = JOINT_MAX
    base: tuple[float, float] = ARM_BASE

    def __post_init__(self):
        n = len(self.link_lengths)
        _check(n >= 1, "Le bras doit avoir au moins un segment.")
        _check(len(self.joint_min) == n and len(self.joint_max) == n,
               f"Bornes articulaires incohérentes avec {n} segments.")
        _check(all(length > 0 for length in self.link_lengths),
               "Les longueurs de segment doivent être > 0.")
        _check(all(lo < hi for lo, hi in zip(self.joint_min, self.joint_max)),
               "Chaque articulation exige joint_min < joint_max.")
        _check(len(self.base) == 2, "La base est un point 2-D.")

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))


@dataclass(frozen=True)
class GridSpec:
    """Grille d'occupation : dimensions en cellules, bornes (xmin, xmax, ymin, ymax)."""
    width: int = GRID_WIDTH
    height: int = GRID_HEIGHT
    bounds: tuple[float, float, float, float] = WORKSPACE_BOUNDS

    def __post_init__(self):
        _check(self.width > 0 and self.height > 0,
               f"Grille de taille nulle : {self.width}×{self.height}.")
        xmin, xmax, ymin, ymax = self.bounds
        _check(xmin < xmax and ymin < ymax, f"Bornes dégénérées : {self.bounds}.")

    @property
    def n_cells(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class SamplerConfig:
    seed: int = SEED
    n_scenarios_train: int = N_SCENARIOS_TRAIN
    n_scenarios_test: int = N_SCENARIOS_TEST
    samples_per_scenario: int = SAMPLES_PER_SCENARIO
    obstacle_count_range: tuple[int, int] = OBSTACLE_COUNT_RANGE
    radius_range: tuple[float, float] = RADIUS_RANGE
    center_annulus: tuple[float, float] = CENTER_ANNULUS
    max_retries: int = MAX_SAMPLING_RETRIES

    def __post_init__(self):
        _check(self.n_scenarios_train >= 0 and self.n_scenarios_test >= 0,
               "Nombre de scénarios négatif.")
        _check(self.samples_per_scenario >= 1, "samples_per_scenario doit être ≥ 1.")
        _check_range("obstacle_count_range", self.obstacle_count_range)
        _check(self.obstacle_count_range[0] >= 0, "Nombre d'obstacles négatif.")
        _check_range("radius_range", self.radius_range, positive=True)
        _check_range("center_annulus", self.center_annulus)
        _check(self.center_annulus[0] >= 0, "Anneau des centres : rayon négatif.")
        _check(self.max_retries >= 1, "max_retries doit être ≥ 1.")


@dataclass(frozen=True)
class ArchitectureConfig:
    hidden_width: int = HIDDEN_WIDTH
    hidden_layers: int = HIDDEN_LAYERS
    extractor_width: int = EXTRACTOR_WIDTH
    gate_layers: tuple[int, ...] = GATE_LAYERS
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        _check(self.hidden_width > 0 and self.extractor_width > 0, "Largeurs nulles.")
        _check(self.hidden_layers >= 1, "Au moins une couche cachée.")
        _check(all(1 <= g <= self.hidden_layers for g in self.gate_layers),
               f"gate_layers {self.gate_layers} hors de 1..{self.hidden_layers}.")
        _check(0.0 < self.slope < 1.0, "La pente Leaky ReLU doit être dans (0, 1).")


@dataclass(frozen=True)
class TrainingConfig:
    lambda_gan: float = LAMBDA_GAN
    lambda_rec: float = LAMBDA_REC
    lambda_map: float = LAMBDA_MAP
    lambda_col: float = LAMBDA_COL
    clearance_threshold: float = CLEARANCE_THRESHOLD
    lambda_col_boost: float = LAMBDA_COL_BOOST
    batch_size: int = BATCH_SIZE
    lr_d: float = LR_D
    lr_ge: float = LR_GE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    steps: int = TRAIN_STEPS
    seed: int = SEED
    log_interval: int = LOG_INTERVAL
    checkpoint_interval: int = CHECKPOINT_INTERVAL
    use_map: bool = True
    use_col: bool = True
    divergence_limit: float = DIVERGENCE_LIMIT

    def __post_init__(self):
        weights = (self.lambda_gan, self.lambda_rec, self.lambda_map,
                   self.lambda_col, self.lambda_col_boost)
        _check(all(w >= 0 for w in weights), "Les poids λ doivent être ≥ 0.")
        _check(self.clearance_threshold >= 0, "clearance_threshold doit être ≥ 0.")
        _check(self.batch_size >= 1, "batch_size doit être ≥ 1.")
        _check(self.lr_d > 0 and self.lr_ge > 0, "Les taux d'apprentissage doivent être > 0.")
        _check(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "β1, β2 doivent être dans [0, 1).")
        _check(self.steps >= 0, "steps doit être ≥ 0.")
        _check(self.log_interval >= 1 and self.checkpoint_interval >= 1,
               "Intervalles de log / checkpoint ≥ 1.")
        _check(self.divergence_limit > 0, "divergence_limit doit être > 0.")


@dataclass(frozen=True)
class OptimizationConfig:
    criterion: str = "velocity"
    iterations: int = OPT_ITERATIONS
    lr: float = OPT_LR
    alpha: float = MIX_ALPHA
    beta: float = MIX_BETA
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        _check(self.criterion in CRITERIA,
               f"Critère inconnu « {self.criterion} » (attendu : {', '.join(CRITERIA)}).")
        _check(1 <= self.iterations <= 2500, "iterations doit être dans [1, 2500].")
        _check(self.alpha >= 0 and self.beta >= 0, "α et β doivent être ≥ 0.")
        _check(self.lr > 0, "lr doit être > 0.")

    def weights(self) -> tuple[float, float, float]:
        """Poids (v, a, j) de L_opt selon le critère."""
        return {
            "velocity": (1.0, 0.0, 0.0),
            "acceleration": (0.0, 1.0, 0.0),
            "jerk": (0.0, 0.0, 1.0),
            "mixed": (1.0, self.alpha, self.beta),
        }[self.criterion]


@dataclass(frozen=True)
class PlannerConfig:
    step: float = RRT_STEP
    goal_bias: float = GOAL_BIAS
    max_iterations: int = MAX_ITERATIONS
    timeout: float = PLANNER_TIMEOUT
    resolution: float = EDGE_RESOLUTION
    seed: int = SEED
    shortcut_trials: int = SHORTCUT_TRIALS
    repair_margin: int = REPAIR_MARGIN

    def __post_init__(self):
        _check(self.step > 0, "step doit être > 0.")
        _check(0.0 <= self.goal_bias <= 1.0, "goal_bias doit être dans [0, 1].")
        _check(self.timeout > 0, "timeout doit être > 0.")
        _check(self.resolution > 0, "resolution doit être > 0.")
        _check(self.max_iterations >= 1, "max_iterations doit être ≥ 1.")
        _check(self.repair_margin >= 1, "repair_margin doit être ≥ 1.")


@dataclass(frozen=True)
class ExperimentSpec:
    split: str = "test"
    region_pairs: tuple[tuple[str, str], ...] = REGION_PAIRS
    trials_per_condition: int = TRIALS_PER_CONDITION
    n_conditions: int = N_SCENARIOS_TEST
    planners: tuple[str, ...] = PLANNERS
    criteria: tuple[str, ...] = BENCH_CRITERIA
    epsilon: float = SUCCESS_EPSILON
    margin: float = START_GOAL_MARGIN
    seed: int = SEED
    path_steps: int = PATH_STEPS
    obstacle_counts: tuple[int, ...] = SWEEP_OBSTACLE_COUNTS
    sweep_conditions: int = 20
    sweep_pair: tuple[str, str] = ("left", "right")
    workers: int = 1
    max_region_attempts: int = MAX_REGION_ATTEMPTS

    def __post_init__(self):
        _check(self.split in ("train", "test"), f"split inconnu : {self.split}.")
        for pair in self.region_pairs:
            _check(len(pair) == 2 and pair[0] != pair[1] and set(pair) <= set(REGIONS),
                   f"Paire de régions invalide : {pair}.")
        _check(set(self.planners) <= set(PLANNERS), f"Planificateurs inconnus : {self.planners}.")
        _check(set(self.criteria) <= set(BENCH_CRITERIA), f"Critères inconnus : {self.criteria}.")
        _check(self.trials_per_condition >= 1 and self.n_conditions >= 1,
               "Au moins un essai et une condition.")
        _check(self.epsilon > 0 and self.margin >= 0, "ε > 0 et marge ≥ 0 requis.")
        _check(self.path_steps >= 2, "path_steps doit être ≥ 2.")
        _check(self.workers >= 1, "workers doit être ≥ 1.")


@dataclass(frozen=True)
class RunConfig:
    arm: ArmSpec = field(default_factory=ArmSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    output_dir: str = DEFAULT_OUTPUT_DIR
    seed: int = SEED


# ──────────────────────────────────────────────
# Chargement / écho JSON
# ──────────────────────────────────────────────

_SEEDED_SECTIONS = ("sampler", "training", "planner", "experiment")


def _coerce(tp: Any, value: Any, where: str) -> Any:
    """Convertit une valeur JSON vers le type annoté du champ."""
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} : objet attendu.")
        return from_dict(tp, value, where)
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} : liste attendue.")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where} : {len(args)} valeurs attendues.")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if origin is types.UnionType or origin is typing.Union:
        return value
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, bool, str) and not isinstance(value, tp):
        raise ConfigError(f"{where} : {tp.__name__} attendu, reçu {value!r}.")
    return value


def from_dict(cls, data: dict, where: str = "config"):
    """Construit une dataclass depuis un dict, en refusant les clés inconnues."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where} : clés inconnues {sorted(unknown)}.")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where} : {exc}") from exc


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load_run_config(path: str | Path | None = None,
                    overrides: dict | None = None) -> RunConfig:
    """
    Résout la configuration complète :
    défauts < fichier JSON < variable d'environnement (dossier de sortie) < flags.
    `overrides` est un dict imbriqué {section: {clé: valeur}} ou {clé: valeur}
    pour les champs de premier niveau.
    """
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"Fichier de configuration introuvable : {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Fichier de configuration illisible ({path}) : {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("La configuration doit être un objet JSON.")

    env_out = os.environ.get(OUTPUT_ENV_VAR)
    if env_out:
        data["output_dir"] = env_out

    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        elif value is not None:
            data[key] = value

    # La graine maîtresse alimente les sections qui n'en fixent pas une
    if "seed" in data:
        for section in _SEEDED_SECTIONS:
            data.setdefault(section, {}).setdefault("seed", data["seed"])

    return from_dict(RunConfig, data)


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Écrit l'écho de la configuration résolue à côté des sorties."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / RESOLVED_CONFIG_NAME
    target.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return target
