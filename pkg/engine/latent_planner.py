"""
engine/latent_planner.py — Planification dans l'espace latent [0,1]ⁿ
=====================================================================
encode → segment latent → (optimisation v/a/jerk) → decode, puis critère de succès :
chemin sans collision et reconstruction des extrémités à ε près (effecteur).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from config import ArmSpec, OptimizationConfig, EDGE_RESOLUTION, PATH_STEPS, SUCCESS_EPSILON
from data.scenario import denormalize, normalize
from engine.autodiff import AdamState, adam_step, backward_gated, forward_gated
from engine.cgan import ModelBundle
from engine.geometry import CollisionChecker, PathCheck, Scenario, end_effector

logger = logging.getLogger(__name__)


class LatentPlanError(ValueError):
    """Entrée hors du cube unité, dimension incohérente ou chemin trop court."""


# ──────────────────────────────────────────────
# Types
# ──────────────────────────────────────────────

@dataclass(eq=False)
class LatentPath:
    points: np.ndarray
    endpoints_fixed: bool = True
    initial_loss: float | None = None
    loss: float | None = None
    iterations: int = 0
    error: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) < 2:
            raise LatentPlanError(f"Chemin latent de forme {self.points.shape} : T ≥ 2 requis.")
        if np.any(self.points < 0.0) or np.any(self.points > 1.0):
            raise LatentPlanError("Point latent hors de [0, 1]ⁿ.")

    @property
    def T(self) -> int:
        return len(self.points)


@dataclass(eq=False)
class Trajectory:
    """Configurations normalisées (T, n) et leur jumeau en radians."""
    normalized: np.ndarray
    radians: np.ndarray
    latent: np.ndarray | None = None
    criterion: str = "none"
    planner: str = "latent"
    clamp_events: int = 0

    @classmethod
    def from_normalized(cls, arm: ArmSpec, normalized, **kwargs) -> "Trajectory":
        normalized = np.asarray(normalized, dtype=np.float64)
        return cls(normalized=normalized, radians=denormalize(arm, normalized), **kwargs)

    @classmethod
    def from_radians(cls, arm: ArmSpec, radians, **kwargs) -> "Trajectory":
        radians = np.asarray(radians, dtype=np.float64)
        return cls(normalized=normalize(arm, radians), radians=radians, **kwargs)

    @property
    def T(self) -> int:
        return len(self.normalized)


class TrajectoryMetrics(NamedTuple):
    sum_v2: float
    sum_a2: float
    sum_j2: float
    joint_length: float
    ee_length: float
    defined: tuple[bool, bool, bool]


# ──────────────────────────────────────────────
# Encodage / décodage
# ──────────────────────────────────────────────

def _check_unit(x: np.ndarray, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != n:
        raise LatentPlanError(f"{what} de dimension {x.shape[-1]}, attendu {n}.")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise LatentPlanError(f"{what} hors de [0, 1]ⁿ.")
    return x


def _tile(cond, rows: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(cond, dtype=np.float64), (rows, np.shape(cond)[-1]))


def _clamp(x: np.ndarray, what: str) -> tuple[np.ndarray, int]:
    clamped = np.clip(x, 0.0, 1.0)
    events = int(np.count_nonzero(clamped != x))
    if events:
        logger.warning("%s : %d coordonnée(s) ramenée(s) dans [0, 1]", what, events)
    return clamped, events


def encode(bundle: ModelBundle, theta, cond) -> np.ndarray:
    """z = E(θ, c), ramené dans le cube unité."""
    theta = _check_unit(theta, bundle.n_joints, "Posture normalisée")
    batch = np.atleast_2d(theta)
    z = forward_gated(bundle.E, batch, _tile(cond, len(batch)))[0]
    z, _ = _clamp(z, "Encodage")
    return z if theta.ndim == 2 else z[0]


def decode_counted(bundle: ModelBundle, z, cond) -> tuple[np.ndarray, int]:
    z = _check_unit(z, bundle.n_joints, "Point latent")
    batch = np.atleast_2d(z)
    theta = forward_gated(bundle.G, batch, _tile(cond, len(batch)))[0]
    theta, events = _clamp(theta, "Décodage")
    return (theta if z.ndim == 2 else theta[0]), events


def decode(bundle: ModelBundle, z, cond) -> np.ndarray:
    """θ = G(z, c) ramené dans [0, 1]ⁿ (les écrêtages sont journalisés)."""
    return decode_counted(bundle, z, cond)[0]


def line_path(z_s, z_g, T: int = PATH_STEPS) -> LatentPath:
    """Interpolation affine, extrémités incluses."""
    if T < 2:
        raise LatentPlanError(f"T doit être ≥ 2 (reçu {T}).")
    z_s = np.asarray(z_s, dtype=np.float64)
    z_g = np.asarray(z_g, dtype=np.float64)
    t = np.linspace(0.0, 1.0, T)[:, None]
    points = np.clip((1.0 - t) * z_s + t * z_g, 0.0, 1.0)
    points[0], points[-1] = z_s, z_g
    return LatentPath(points=points)


# ──────────────────────────────────────────────
# Métriques
# ──────────────────────────────────────────────

def step_metrics(normalized: np.ndarray) -> dict[str, np.ndarray]:
    """‖v_t‖², ‖a_t‖², ‖j_t‖² par pas (0 là où l'ordre n'est pas défini)."""
    normalized = np.asarray(normalized, dtype=np.float64)
    T = len(normalized)
    out = {}
    for order, key in ((1, "v2"), (2, "a2"), (3, "j2")):
        col = np.zeros(T)
        if T > order:
            col[order:] = np.sum(np.diff(normalized, n=order, axis=0) ** 2, axis=1)
        out[key] = col
    return out


def metrics(traj: Trajectory, arm: ArmSpec) -> TrajectoryMetrics:
    if traj.T < 2:
        raise LatentPlanError("Métriques : au moins 2 postures requises.")
    steps = step_metrics(traj.normalized)
    joint_length = float(np.sum(np.linalg.norm(np.diff(traj.radians, axis=0), axis=1)))
    ee = end_effector(arm, traj.radians)
    ee_length = float(np.sum(np.linalg.norm(np.diff(ee, axis=0), axis=1)))
    return TrajectoryMetrics(
        sum_v2=float(steps["v2"].sum()), sum_a2=float(steps["a2"].sum()), sum_j2=float(steps["j2"].sum()),
        joint_length=joint_length, ee_length=ee_length,
        defined=(traj.T >= 2, traj.T >= 3, traj.T >= 4),
    )


# ──────────────────────────────────────────────
# Optimisation
# ──────────────────────────────────────────────

def _diff_adjoint(g: np.ndarray) -> np.ndarray:
    out = np.zeros((len(g) + 1, g.shape[1]))
    out[:-1] -= g
    out[1:] += g
    return out


def smoothness_cost(theta: np.ndarray, weights: tuple[float, float, float]) -> tuple[float, np.ndarray]:
    """L_opt = w_v·Σ‖v‖² + w_a·Σ‖a‖² + w_j·Σ‖j‖² et son gradient par rapport à θ."""
    loss = 0.0
    grad = np.zeros_like(theta)
    for order, w in enumerate(weights, start=1):
        if w == 0.0 or len(theta) <= order:
            continue
        d = np.diff(theta, n=order, axis=0)
        loss += w * float(np.sum(d * d))
        g = 2.0 * w * d
        for _ in range(order):
            g = _diff_adjoint(g)
        grad += g
    return loss, grad


def _decoded_cost(bundle: ModelBundle, points: np.ndarray, cond_rows: np.ndarray,
                  weights) -> tuple[float, np.ndarray]:
    raw, tape = forward_gated(bundle.G, points, cond_rows)
    theta = np.clip(raw, 0.0, 1.0)
    loss, dtheta = smoothness_cost(theta, weights)
    # Gradient masqué là où le décodage est écrêté
    dtheta = np.where((raw >= 0.0) & (raw <= 1.0), dtheta, 0.0)
    dz = backward_gated(tape, dtheta).inputs
    return loss, dz


def optimize(bundle: ModelBundle, path: LatentPath, cond, cfg: OptimizationConfig) -> LatentPath:
    """
    Adam sur les points intérieurs z_1..z_{T−2} ; extrémités fixes, re-projection
    dans [0, 1]ⁿ à chaque pas. Retourne le meilleur itéré (perte ≤ perte initiale).
    """
    weights = cfg.weights()
    points = path.points.copy()
    cond_rows = _tile(cond, len(points))
    if path.T < 3:
        loss, _ = _decoded_cost(bundle, points, cond_rows, weights)
        return replace(path, points=points, initial_loss=loss, loss=loss, iterations=0)

    interior = points[1:-1]
    state = AdamState.for_params([interior], cfg.lr, cfg.beta1, cfg.beta2)
    best_points, best_loss, initial = points.copy(), np.inf, None

    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(cfg.iterations + 1):
            loss, dz = _decoded_cost(bundle, points, cond_rows, weights)
            if not np.isfinite(loss) or not np.all(np.isfinite(dz)):
                logger.error("Optimisation interrompue : perte non finie à l'itération %d", it)
                return replace(path, points=path.points.copy(), error="non-finite",
                               initial_loss=initial, loss=initial, iterations=it)
            if initial is None:
                initial = loss
            if loss < best_loss:
                best_loss, best_points = loss, points.copy()
            if it == cfg.iterations:
                break
            adam_step([interior], [dz[1:-1]], state)
            np.clip(interior, 0.0, 1.0, out=interior)

    logger.debug("Optimisation « %s » : %.6g → %.6g", cfg.criterion, initial, best_loss)
    return LatentPath(points=best_points, endpoints_fixed=True, initial_loss=initial,
                      loss=best_loss, iterations=cfg.iterations)


# ──────────────────────────────────────────────
# Pipeline & critère de succès
# ──────────────────────────────────────────────

@dataclass(eq=False)
class LatentPlan:
    trajectory: Trajectory
    path: LatentPath
    elapsed: float


def plan_latent(bundle: ModelBundle, arm: ArmSpec, scenario: Scenario, theta_s, theta_g,
                T: int = PATH_STEPS, opt_cfg: OptimizationConfig | None = None) -> LatentPlan:
    """Plan brut : aucun appel au vérificateur de collisions."""
    t0 = time.perf_counter()
    cond = scenario.condition
    z = encode(bundle, np.vstack([theta_s, theta_g]), cond)
    path = line_path(z[0], z[1], T)
    criterion = "none"
    if opt_cfg is not None:
        path = optimize(bundle, path, cond, opt_cfg)
        criterion = opt_cfg.criterion
    theta, events = decode_counted(bundle, path.points, cond)
    traj = Trajectory.from_normalized(arm, theta, latent=path.points, criterion=criterion,
                                      planner="latent", clamp_events=events)
    return LatentPlan(trajectory=traj, path=path, elapsed=time.perf_counter() - t0)


class SuccessVerdict(NamedTuple):
    success: bool
    reasons: tuple[str, ...]
    start_error: float
    goal_error: float
    path: PathCheck

    @property
    def collision_free(self) -> bool:
        return not self.path.colliding


def success_check(arm: ArmSpec, bundle: ModelBundle, scenario: Scenario, theta_s, theta_g,
                  traj: Trajectory, eps: float = SUCCESS_EPSILON,
                  step: float = EDGE_RESOLUTION, checker: CollisionChecker | None = None) -> SuccessVerdict:
    """
    Succès ⇔ chemin sans collision ET ‖FK(θ_rec) − FK(θ_cible)‖ < ε aux deux extrémités,
    avec θ_rec = G(E(θ_cible, c), c).
    """
    if eps <= 0:
        raise ValueError(f"ε doit être > 0 (reçu {eps}).")
    checker = checker or CollisionChecker(arm, scenario, resolution=step)
    path_check = checker.check_path(traj.radians, step)

    targets = np.vstack([theta_s, theta_g])
    cond = scenario.condition
    rec = decode(bundle, encode(bundle, targets, cond), cond)
    ee = end_effector(arm, denormalize(arm, np.vstack([rec, targets])))
    start_err = float(np.linalg.norm(ee[0] - ee[2]))
    goal_err = float(np.linalg.norm(ee[1] - ee[3]))

    reasons = []
    if path_check.colliding:
        reasons.append("collision")
    if not start_err < eps:
        reasons.append("start-reconstruction")
    if not goal_err < eps:
        reasons.append("goal-reconstruction")
    return SuccessVerdict(not reasons, tuple(reasons), start_err, goal_err, path_check)


def anchor_endpoints(arm: ArmSpec, traj: Trajectory, theta_s, theta_g) -> Trajectory:
    """Ajoute les postures demandées en tête et en queue (normalisées)."""
    ends = np.vstack([theta_s, theta_g])
    rad = denormalize(arm, ends)
    latent = None
    if traj.latent is not None:
        latent = np.vstack([traj.latent[:1], traj.latent, traj.latent[-1:]])
    return Trajectory(
        normalized=np.vstack([ends[:1], traj.normalized, ends[1:]]),
        radians=np.vstack([rad[:1], traj.radians, rad[1:]]),
        latent=latent, criterion=traj.criterion, planner=traj.planner,
        clamp_events=traj.clamp_events,
    )


def verify_anchored(arm: ArmSpec, scenario: Scenario, traj: Trajectory, q_start, q_goal,
                    step: float = EDGE_RESOLUTION, checker: CollisionChecker | None = None) -> bool:
    """Chemin propre au pas donné et extrémités identiques (radians) aux postures demandées."""
    checker = checker or CollisionChecker(arm, scenario, resolution=step)
    if traj.T == 0:
        return False
    clean = not checker.check_path(traj.radians, step).colliding
    return bool(clean and np.array_equal(traj.radians[0], np.asarray(q_start, dtype=np.float64))
                and np.array_equal(traj.radians[-1], np.asarray(q_goal, dtype=np.float64)))
