"""
engine/classical_planner.py — RRT, RRT-Connect, raccourcis et réparation CAG
=============================================================================
Planification dans l'espace articulaire en radians, métrique euclidienne.
Chaque arête retournée est validée par le vérificateur de collisions ;
les arêtes des arbres sont en plus certifiées entre échantillons
(borne de Lipschitz du bras sur la clearance).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from config import ArmSpec, PlannerConfig
from engine.geometry import CollisionChecker, Scenario, edge_subdivisions
from engine.latent_planner import Trajectory

logger = logging.getLogger(__name__)

MAX_CERTIFY_DEPTH = 12


class PlanningError(RuntimeError):
    reason = "planning"


class PlannerTimeoutError(PlanningError):
    reason = "timeout"


class IterationLimitError(PlanningError):
    reason = "max-iterations"


class EndpointCollisionError(PlanningError, ValueError):
    reason = "endpoint-collision"


class RepairFailedError(PlanningError):
    reason = "repair-failed"


@dataclass(eq=False)
class PlanResult:
    path: np.ndarray
    planner: str
    iterations: int
    collision_checks: int
    elapsed: float


# ──────────────────────────────────────────────
# Arbre
# ──────────────────────────────────────────────

@dataclass(eq=False)
class Tree:
    """Nœuds en ordre d'insertion ; parent[i] < i, racine sans parent (-1)."""
    dim: int
    nodes: np.ndarray = field(init=False)
    parents: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.nodes = np.empty((64, self.dim))

    def __len__(self) -> int:
        return len(self.parents)

    def add(self, q: np.ndarray, parent: int) -> int:
        n = len(self.parents)
        if n == len(self.nodes):
            self.nodes = np.concatenate([self.nodes, np.empty_like(self.nodes)])
        self.nodes[n] = q
        self.parents.append(parent)
        return n

    def nearest(self, q: np.ndarray) -> int:
        d = cdist(q[None, :], self.nodes[:len(self.parents)])
        return int(np.argmin(d[0]))

    def path_to_root(self, idx: int) -> np.ndarray:
        out = []
        while idx >= 0:
            out.append(self.nodes[idx])
            idx = self.parents[idx]
        return np.array(out[::-1])


# ──────────────────────────────────────────────
# Vérification certifiée des arêtes
# ──────────────────────────────────────────────

def lipschitz_bound(arm: ArmSpec) -> float:
    """Déplacement maximal d'un point du bras par unité de norme euclidienne articulaire."""
    return arm.reach * math.sqrt(arm.n_joints)


def edge_certified(checker: CollisionChecker, q0: np.ndarray, q1: np.ndarray,
                   step: float, lipschitz: float) -> bool:
    """
    Échantillonne l'arête au pas `step` puis prouve l'absence de collision entre
    échantillons voisins : c_a + c_b > L·d, sinon bissection bornée.
    L'auto-collision n'est vérifiée qu'aux échantillons.
    """
    k = edge_subdivisions(q0, q1, step)
    t = np.arange(k + 1, dtype=np.float64) / k
    qs = q0[None, :] + t[:, None] * (q1 - q0)[None, :]
    out = checker.check_batch(qs)
    if np.any(out["colliding"] | out["self_colliding"]):
        return False
    clear = out["clearance"]
    for i in range(k):
        if not _certify(checker, qs[i], qs[i + 1], clear[i], clear[i + 1], lipschitz, 0):
            return False
    return True


def _certify(checker, qa, qb, ca, cb, lipschitz, depth) -> bool:
    d = float(np.linalg.norm(qb - qa))
    if ca + cb > lipschitz * d:
        return True
    if depth >= MAX_CERTIFY_DEPTH:
        return False
    qm = 0.5 * (qa + qb)
    res = checker.check(qm)
    if not res.free:
        return False
    return (_certify(checker, qa, qm, ca, res.clearance, lipschitz, depth + 1)
            and _certify(checker, qm, qb, res.clearance, cb, lipschitz, depth + 1))


# ──────────────────────────────────────────────
# RRT / RRT-Connect
# ──────────────────────────────────────────────

class _Context:
    def __init__(self, arm: ArmSpec, scenario: Scenario, cfg: PlannerConfig,
                 checker: CollisionChecker | None):
        self.arm = arm
        self.cfg = cfg
        self.checker = checker or CollisionChecker(arm, scenario, resolution=cfg.resolution)
        self.lo = np.asarray(arm.joint_min, dtype=np.float64)
        self.hi = np.asarray(arm.joint_max, dtype=np.float64)
        self.lipschitz = lipschitz_bound(arm)
        self.t0 = time.perf_counter()

    def edge_free(self, q0, q1) -> bool:
        return edge_certified(self.checker, q0, q1, self.cfg.resolution, self.lipschitz)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi)

    def steer(self, q_from: np.ndarray, q_to: np.ndarray) -> np.ndarray:
        delta = q_to - q_from
        dist = float(np.linalg.norm(delta))
        if dist <= self.cfg.step:
            return q_to.copy()
        return q_from + delta * (self.cfg.step / dist)

    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def check_timeout(self, name: str, it: int) -> None:
        if self.elapsed() > self.cfg.timeout:
            logger.warning("%s : délai de %.1f s dépassé après %d itérations", name, self.cfg.timeout, it)
            raise PlannerTimeoutError(f"{name} : délai de {self.cfg.timeout} s dépassé ({it} itérations).")


def _check_endpoints(ctx: _Context, q_start: np.ndarray, q_goal: np.ndarray) -> None:
    for label, q in (("départ", q_start), ("but", q_goal)):
        if np.any(q < ctx.lo) or np.any(q > ctx.hi):
            raise EndpointCollisionError(f"Posture de {label} hors des bornes articulaires.")
        if not ctx.checker.is_free(q):
            raise EndpointCollisionError(f"Posture de {label} en collision.")


def rrt(arm: ArmSpec, scenario: Scenario, q_start, q_goal, cfg: PlannerConfig,
        checker: CollisionChecker | None = None, rng: np.random.Generator | None = None) -> PlanResult:
    """RRT avec biais vers le but ; échec sur délai ou nombre d'itérations."""
    ctx = _Context(arm, scenario, cfg, checker)
    q_start = np.asarray(q_start, dtype=np.float64)
    q_goal = np.asarray(q_goal, dtype=np.float64)
    _check_endpoints(ctx, q_start, q_goal)
    rng = rng or np.random.Generator(np.random.PCG64(cfg.seed))

    tree = Tree(arm.n_joints)
    tree.add(q_start, -1)
    if np.linalg.norm(q_goal - q_start) <= cfg.step and ctx.edge_free(q_start, q_goal):
        tree.add(q_goal, 0)
        return _result(ctx, tree.path_to_root(1), "rrt", 0)

    for it in range(1, cfg.max_iterations + 1):
        ctx.check_timeout("rrt", it)
        q_rand = q_goal if rng.random() < cfg.goal_bias else ctx.sample(rng)
        near = tree.nearest(q_rand)
        q_new = ctx.steer(tree.nodes[near], q_rand)
        if not ctx.edge_free(tree.nodes[near], q_new):
            continue
        idx = tree.add(q_new, near)
        if np.linalg.norm(q_goal - q_new) <= cfg.step and ctx.edge_free(q_new, q_goal):
            if not np.array_equal(q_new, q_goal):
                idx = tree.add(q_goal, idx)
            return _result(ctx, tree.path_to_root(idx), "rrt", it)

    raise IterationLimitError(f"rrt : {cfg.max_iterations} itérations sans solution.")


_TRAPPED, _ADVANCED, _REACHED = 0, 1, 2


def _extend(ctx: _Context, tree: Tree, q: np.ndarray) -> tuple[int, int]:
    near = tree.nearest(q)
    q_new = ctx.steer(tree.nodes[near], q)
    if not ctx.edge_free(tree.nodes[near], q_new):
        return _TRAPPED, -1
    idx = tree.add(q_new, near)
    return (_REACHED if np.array_equal(q_new, q) else _ADVANCED), idx


def _connect(ctx: _Context, tree: Tree, q: np.ndarray) -> tuple[int, int]:
    status, idx = _ADVANCED, -1
    while status == _ADVANCED:
        status, new_idx = _extend(ctx, tree, q)
        if new_idx >= 0:
            idx = new_idx
    return status, idx


def rrt_connect(arm: ArmSpec, scenario: Scenario, q_start, q_goal, cfg: PlannerConfig,
                checker: CollisionChecker | None = None, rng: np.random.Generator | None = None) -> PlanResult:
    """Deux arbres (départ, but) avec heuristique de connexion, alternés à chaque itération."""
    ctx = _Context(arm, scenario, cfg, checker)
    q_start = np.asarray(q_start, dtype=np.float64)
    q_goal = np.asarray(q_goal, dtype=np.float64)
    _check_endpoints(ctx, q_start, q_goal)
    rng = rng or np.random.Generator(np.random.PCG64(cfg.seed))

    if ctx.edge_free(q_start, q_goal):
        return _result(ctx, np.vstack([q_start, q_goal]), "rrt_connect", 0)

    start_tree, goal_tree = Tree(arm.n_joints), Tree(arm.n_joints)
    start_tree.add(q_start, -1)
    goal_tree.add(q_goal, -1)
    tree_a, tree_b = start_tree, goal_tree

    for it in range(1, cfg.max_iterations + 1):
        ctx.check_timeout("rrt_connect", it)
        q_rand = ctx.sample(rng)
        status, idx_a = _extend(ctx, tree_a, q_rand)
        if status != _TRAPPED:
            q_new = tree_a.nodes[idx_a]
            status_b, idx_b = _connect(ctx, tree_b, q_new)
            if status_b == _REACHED:
                path_a = tree_a.path_to_root(idx_a)
                path_b = tree_b.path_to_root(idx_b)[::-1][1:]
                path = np.vstack([path_a, path_b])
                if tree_a is goal_tree:
                    path = path[::-1]
                return _result(ctx, path, "rrt_connect", it)
        tree_a, tree_b = tree_b, tree_a

    raise IterationLimitError(f"rrt_connect : {cfg.max_iterations} itérations sans solution.")


def _result(ctx: _Context, path: np.ndarray, name: str, iterations: int) -> PlanResult:
    check = ctx.checker.check_path(path, ctx.cfg.resolution)
    if check.colliding:
        raise PlanningError(f"{name} : chemin retourné invalide (waypoint {check.first_bad_index}).")
    logger.debug("%s : %d waypoints, %d itérations, %d vérifications",
                 name, len(path), iterations, ctx.checker.calls)
    return PlanResult(path=path, planner=name, iterations=iterations,
                      collision_checks=ctx.checker.calls, elapsed=ctx.elapsed())


# ──────────────────────────────────────────────
# Raccourcis
# ──────────────────────────────────────────────

def path_length(path: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))


def shortcut(arm: ArmSpec, scenario: Scenario, path, cfg: PlannerConfig,
             checker: CollisionChecker | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Raccourcis aléatoires entre paires de waypoints ; la longueur ne croît jamais."""
    path = np.asarray(path, dtype=np.float64)
    checker = checker or CollisionChecker(arm, scenario, resolution=cfg.resolution)
    rng = rng or np.random.Generator(np.random.PCG64(cfg.seed))
    lipschitz = lipschitz_bound(arm)
    for _ in range(cfg.shortcut_trials):
        if len(path) < 3:
            break
        i, j = sorted(rng.choice(len(path), size=2, replace=False))
        if j - i < 2:
            continue
        if path_length(path[i:j + 1]) <= float(np.linalg.norm(path[j] - path[i])):
            continue
        if edge_certified(checker, path[i], path[j], cfg.resolution, lipschitz):
            path = np.vstack([path[:i + 1], path[j:]])
    return path


# ──────────────────────────────────────────────
# Réparation CAG
# ──────────────────────────────────────────────

def colliding_spans(bad: np.ndarray, margin: int) -> list[tuple[int, int]]:
    """Fenêtres [avant, après] autour des séquences de waypoints fautifs, fusionnées si elles se chevauchent."""
    idx = np.flatnonzero(bad)
    if len(idx) == 0:
        return []
    runs = []
    start = prev = int(idx[0])
    for i in idx[1:]:
        if i != prev + 1:
            runs.append((start, prev))
            start = int(i)
        prev = int(i)
    runs.append((start, prev))

    spans: list[tuple[int, int]] = []
    for s, e in runs:
        before, after = s - margin, e + margin
        if spans and before <= spans[-1][1]:
            spans[-1] = (spans[-1][0], after)
        else:
            spans.append((before, after))
    return spans


def repair_cag(arm: ArmSpec, scenario: Scenario, traj: Trajectory, cfg: PlannerConfig,
               checker: CollisionChecker | None = None) -> Trajectory:
    """
    Remplace chaque séquence fautive par un chemin RRT-Connect entre le dernier
    waypoint libre avant et le premier après ; le reste est conservé au bit près.
    """
    checker = checker or CollisionChecker(arm, scenario, resolution=cfg.resolution)
    radians = traj.radians
    check = checker.check_path(radians, cfg.resolution)
    if not check.colliding:
        return traj

    T = len(radians)
    pieces_rad, pieces_norm, pieces_lat = [], [], []
    cursor = 0
    for k, (before, after) in enumerate(colliding_spans(check.bad, cfg.repair_margin)):
        before, after = _clip_anchor(checker, radians, before, "début"), _clip_anchor(checker, radians, after, "fin")
        if after <= before:
            continue
        sub_cfg = replace(cfg, seed=cfg.seed + k)
        try:
            result = rrt_connect(arm, scenario, radians[before], radians[after], sub_cfg, checker=checker)
        except PlanningError as exc:
            raise RepairFailedError(f"Réparation impossible entre {before} et {after} : {exc}") from exc
        keep = slice(cursor, before + 1)
        pieces_rad.append(radians[keep])
        pieces_norm.append(traj.normalized[keep])
        new = result.path[1:-1]
        pieces_rad.append(new)
        pieces_norm.append(Trajectory.from_radians(arm, new).normalized if len(new) else new)
        if traj.latent is not None:
            pieces_lat.append(traj.latent[keep])
            pieces_lat.append(np.full((len(new), traj.latent.shape[1]), np.nan))
        cursor = after
    pieces_rad.append(radians[cursor:])
    pieces_norm.append(traj.normalized[cursor:])
    if traj.latent is not None:
        pieces_lat.append(traj.latent[cursor:])

    repaired = Trajectory(
        normalized=np.vstack(pieces_norm), radians=np.vstack(pieces_rad),
        latent=np.vstack(pieces_lat) if traj.latent is not None else None,
        criterion=traj.criterion, planner=f"{traj.planner}+cag", clamp_events=traj.clamp_events,
    )
    final = checker.check_path(repaired.radians, cfg.resolution)
    if final.colliding:
        raise RepairFailedError(f"Trajectoire réparée encore en collision (waypoint {final.first_bad_index}).")
    logger.debug("CAG : %d → %d waypoints", T, repaired.T)
    return repaired


def _clip_anchor(checker: CollisionChecker, radians: np.ndarray, idx: int, side: str) -> int:
    """Ancre dans les bornes de la trajectoire ; une extrémité en collision est une erreur."""
    T = len(radians)
    clipped = min(max(idx, 0), T - 1)
    if not checker.is_free(radians[clipped]):
        raise EndpointCollisionError(
            f"Ancre de {side} (waypoint {clipped}) en collision : réparation impossible.")
    return clipped
