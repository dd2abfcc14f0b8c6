"""
engine/geometry.py — Cinématique du bras plan, obstacles, collisions, grille d'occupation
=========================================================================================
Toutes les fonctions sont pures, hormis les compteurs de configurations
(CollisionChecker.calls et le total par thread de configs_checked).
Angles en radians, longueurs en unités d'espace de travail.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from config import ArmSpec, GridSpec, CLEARANCE_SENTINEL, EDGE_RESOLUTION

logger = logging.getLogger(__name__)

__all__ = [
    "ArmSpec", "GridSpec", "CircleObstacle", "OccupancyGrid", "Scenario",
    "GeometryError", "ConfigCheck", "PathCheck", "CollisionChecker",
    "forward_kinematics", "forward_kinematics_batch", "segment_clearance",
    "check_config", "check_configs", "check_path", "configs_checked", "rasterize",
]

_tally = threading.local()


class GeometryError(ValueError):
    """Dimension incohérente, chemin vide ou grille dégénérée."""


# ──────────────────────────────────────────────
# Types
# ──────────────────────────────────────────────

@dataclass(frozen=True)
class CircleObstacle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError(f"Rayon d'obstacle invalide : {self.radius}.")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "radius", float(self.radius))


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Grille d'occupation ; `cells` a la forme (height, width), ligne 0 = y minimal."""
    spec: GridSpec
    cells: np.ndarray

    @property
    def width(self) -> int:
        return self.spec.width

    @property
    def height(self) -> int:
        return self.spec.height

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return self.spec.bounds

    @property
    def flat(self) -> np.ndarray:
        """Vecteur de condition c (ordre ligne par ligne)."""
        return self.cells.reshape(-1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.cells, other.cells)


@dataclass(frozen=True, eq=False)
class Scenario:
    obstacles: tuple[CircleObstacle, ...]
    grid: OccupancyGrid
    scenario_id: int = -1

    @classmethod
    def build(cls, obstacles: Sequence[CircleObstacle], grid_spec: GridSpec,
              scenario_id: int = -1) -> "Scenario":
        obstacles = tuple(obstacles)
        return cls(obstacles=obstacles, grid=rasterize(obstacles, grid_spec),
                   scenario_id=scenario_id)

    @property
    def condition(self) -> np.ndarray:
        return self.grid.flat

    @property
    def centers(self) -> np.ndarray:
        return np.array([o.center for o in self.obstacles], dtype=np.float64).reshape(-1, 2)

    @property
    def radii(self) -> np.ndarray:
        return np.array([o.radius for o in self.obstacles], dtype=np.float64)

    def centroid(self, default: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
        """Barycentre des centres d'obstacles (point par défaut si monde vide)."""
        if not self.obstacles:
            return np.asarray(default, dtype=np.float64)
        return self.centers.mean(axis=0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        return (self.obstacles == other.obstacles and self.grid == other.grid
                and self.scenario_id == other.scenario_id)


class ConfigCheck(NamedTuple):
    colliding: bool
    clearance: float
    self_colliding: bool

    @property
    def free(self) -> bool:
        return not (self.colliding or self.self_colliding)


class PathCheck(NamedTuple):
    colliding: bool
    first_bad_index: int | None
    last_bad_index: int | None
    bad: np.ndarray
    n_checked: int


# ──────────────────────────────────────────────
# Cinématique
# ──────────────────────────────────────────────

def _as_configs(arm: ArmSpec, qs) -> np.ndarray:
    qs = np.asarray(qs, dtype=np.float64)
    if qs.ndim == 1:
        qs = qs[None, :]
    if qs.ndim != 2 or qs.shape[1] != arm.n_joints:
        raise GeometryError(
            f"Configuration de dimension {qs.shape} incompatible avec {arm.n_joints} articulations.")
    if not np.all(np.isfinite(qs)):
        raise GeometryError("Configuration articulaire non finie.")
    return qs


def forward_kinematics_batch(arm: ArmSpec, qs) -> np.ndarray:
    """Positions articulaires (B, n+1, 2), de la base à l'effecteur."""
    qs = _as_configs(arm, qs)
    angles = np.cumsum(qs, axis=1)
    lengths = np.asarray(arm.link_lengths, dtype=np.float64)
    steps = np.stack([lengths * np.cos(angles), lengths * np.sin(angles)], axis=-1)
    points = np.concatenate([np.zeros((qs.shape[0], 1, 2)), np.cumsum(steps, axis=1)], axis=1)
    return points + np.asarray(arm.base, dtype=np.float64)


def forward_kinematics(arm: ArmSpec, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise GeometryError(f"Configuration 1-D attendue, reçu {q.shape}.")
    return forward_kinematics_batch(arm, q)[0]


def end_effector(arm: ArmSpec, qs) -> np.ndarray:
    """Positions de l'effecteur (B, 2)."""
    return forward_kinematics_batch(arm, qs)[:, -1, :]


# ──────────────────────────────────────────────
# Distances & intersections
# ──────────────────────────────────────────────

def _point_segment_distance(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Distance de c au segment [a, b] ; broadcast sur les dimensions de tête."""
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    safe = np.where(denom > 0.0, denom, 1.0)
    t = np.where(denom > 0.0, np.sum((c - a) * ab, axis=-1) / safe, 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(c - closest, axis=-1)


def segment_clearance(p0, p1, obs: CircleObstacle) -> float:
    """Distance signée du segment au disque : négative ⇔ intersection."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    c = np.asarray(obs.center, dtype=np.float64)
    return float(_point_segment_distance(p0, p1, c) - obs.radius)


def _orientation(a, b, c) -> np.ndarray:
    return ((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
            - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))


def _on_segment(a, b, c) -> np.ndarray:
    # c colinéaire à [a, b] : test de boîte englobante
    return ((np.minimum(a[..., 0], b[..., 0]) <= c[..., 0]) & (c[..., 0] <= np.maximum(a[..., 0], b[..., 0]))
            & (np.minimum(a[..., 1], b[..., 1]) <= c[..., 1]) & (c[..., 1] <= np.maximum(a[..., 1], b[..., 1])))


def _segments_intersect(a, b, c, d) -> np.ndarray:
    o1 = _orientation(a, b, c)
    o2 = _orientation(a, b, d)
    o3 = _orientation(c, d, a)
    o4 = _orientation(c, d, b)
    proper = (np.sign(o1) * np.sign(o2) < 0) & (np.sign(o3) * np.sign(o4) < 0)
    touching = (((o1 == 0) & _on_segment(a, b, c)) | ((o2 == 0) & _on_segment(a, b, d))
                | ((o3 == 0) & _on_segment(c, d, a)) | ((o4 == 0) & _on_segment(c, d, b)))
    return proper | touching


# ──────────────────────────────────────────────
# Vérification de configurations
# ──────────────────────────────────────────────

def configs_checked() -> int:
    """Total des configurations évaluées par check_configs dans le thread courant."""
    return getattr(_tally, "n", 0)


def check_configs(arm: ArmSpec, scenario: Scenario, qs) -> dict[str, np.ndarray]:
    """
    Étiquetage vectorisé : {colliding, clearance, self_colliding}, chacun de forme (B,).
    La clearance vaut CLEARANCE_SENTINEL en l'absence d'obstacle.
    """
    points = forward_kinematics_batch(arm, qs)
    a, b = points[:, :-1, :], points[:, 1:, :]
    batch = points.shape[0]
    _tally.n = configs_checked() + batch

    if scenario.obstacles:
        centers = scenario.centers
        dist = _point_segment_distance(a[:, :, None, :], b[:, :, None, :], centers[None, None, :, :])
        clearance = np.min(dist - scenario.radii[None, None, :], axis=(1, 2))
    else:
        clearance = np.full(batch, CLEARANCE_SENTINEL)

    self_colliding = np.zeros(batch, dtype=bool)
    n = arm.n_joints
    for i in range(n):
        for j in range(i + 2, n):
            self_colliding |= _segments_intersect(a[:, i], b[:, i], a[:, j], b[:, j])

    return {"colliding": clearance < 0.0, "clearance": clearance, "self_colliding": self_colliding}


def check_config(arm: ArmSpec, scenario: Scenario, q) -> ConfigCheck:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise GeometryError(f"Configuration 1-D attendue, reçu {q.shape}.")
    out = check_configs(arm, scenario, q)
    return ConfigCheck(bool(out["colliding"][0]), float(out["clearance"][0]),
                       bool(out["self_colliding"][0]))


def edge_subdivisions(q0: np.ndarray, q1: np.ndarray, step: float) -> int:
    """Nombre de sous-segments, puissance de deux, tel que chaque pas ≤ step."""
    dist = float(np.linalg.norm(np.asarray(q1) - np.asarray(q0)))
    if dist <= step:
        return 1
    return 1 << math.ceil(math.log2(dist / step))


class CollisionChecker:
    """
    Vérificateur instrumenté sur un couple (bras, scénario).
    `calls` compte les configurations évaluées ; une instance par planification.
    """

    def __init__(self, arm: ArmSpec, scenario: Scenario, resolution: float = EDGE_RESOLUTION):
        if resolution <= 0:
            raise GeometryError(f"Résolution de vérification invalide : {resolution}.")
        self.arm = arm
        self.scenario = scenario
        self.resolution = resolution
        self.calls = 0

    def check_batch(self, qs) -> dict[str, np.ndarray]:
        out = check_configs(self.arm, self.scenario, qs)
        self.calls += len(out["clearance"])
        return out

    def check(self, q) -> ConfigCheck:
        out = self.check_batch(np.asarray(q, dtype=np.float64)[None, :])
        return ConfigCheck(bool(out["colliding"][0]), float(out["clearance"][0]),
                           bool(out["self_colliding"][0]))

    def is_free(self, q) -> bool:
        return self.check(q).free

    def edge_free(self, q0, q1, step: float | None = None) -> bool:
        """Vrai si toutes les postures interpolées (extrémités incluses) sont libres."""
        step = self.resolution if step is None else step
        q0 = np.asarray(q0, dtype=np.float64)
        q1 = np.asarray(q1, dtype=np.float64)
        k = edge_subdivisions(q0, q1, step)
        t = np.arange(k + 1, dtype=np.float64) / k
        out = self.check_batch(q0[None, :] + t[:, None] * (q1 - q0)[None, :])
        return not bool(np.any(out["colliding"] | out["self_colliding"]))

    def check_path(self, qs, step: float | None = None) -> PathCheck:
        """
        Vérifie chaque waypoint et les interpolations linéaires entre waypoints
        consécutifs à une résolution ≤ step. Une violation à l'intérieur d'un
        segment est attribuée au waypoint le plus proche (t < 0.5 → début).
        """
        step = self.resolution if step is None else step
        if step <= 0:
            raise GeometryError(f"Pas de vérification invalide : {step}.")
        qs = np.asarray(qs, dtype=np.float64)
        if qs.ndim != 2 or len(qs) == 0:
            raise GeometryError("Chemin vide : au moins un waypoint requis.")
        qs = _as_configs(self.arm, qs)

        postures = [qs]
        owners = [np.arange(len(qs))]
        for i in range(len(qs) - 1):
            k = edge_subdivisions(qs[i], qs[i + 1], step)
            if k == 1:
                continue
            t = np.arange(1, k, dtype=np.float64) / k
            postures.append(qs[i][None, :] + t[:, None] * (qs[i + 1] - qs[i])[None, :])
            owners.append(np.where(t < 0.5, i, i + 1))

        all_q = np.concatenate(postures, axis=0)
        owner = np.concatenate(owners)
        out = self.check_batch(all_q)
        violating = out["colliding"] | out["self_colliding"]

        bad = np.zeros(len(qs), dtype=bool)
        bad[owner[violating]] = True
        if not bad.any():
            return PathCheck(False, None, None, bad, len(all_q))
        idx = np.flatnonzero(bad)
        return PathCheck(True, int(idx[0]), int(idx[-1]), bad, len(all_q))


def check_path(arm: ArmSpec, scenario: Scenario, qs, step: float = EDGE_RESOLUTION) -> PathCheck:
    return CollisionChecker(arm, scenario, resolution=step).check_path(qs, step)


# ──────────────────────────────────────────────
# Grille d'occupation
# ──────────────────────────────────────────────

def rasterize(obstacles: Sequence[CircleObstacle], grid_spec: GridSpec) -> OccupancyGrid:
    """Cellule = 1.0 ssi le disque intersecte le rectangle de la cellule (conservatif)."""
    if grid_spec.width <= 0 or grid_spec.height <= 0:
        raise GeometryError("Grille de taille nulle.")
    xmin, xmax, ymin, ymax = grid_spec.bounds
    xs = np.linspace(xmin, xmax, grid_spec.width + 1)
    ys = np.linspace(ymin, ymax, grid_spec.height + 1)
    x0, x1 = xs[:-1][None, :], xs[1:][None, :]
    y0, y1 = ys[:-1][:, None], ys[1:][:, None]

    cells = np.zeros((grid_spec.height, grid_spec.width), dtype=np.float64)
    for obs in obstacles:
        cx, cy = obs.center
        # Point du rectangle le plus proche du centre
        dx = np.clip(cx, x0, x1) - cx
        dy = np.clip(cy, y0, y1) - cy
        cells[dx * dx + dy * dy <= obs.radius * obs.radius] = 1.0
    return OccupancyGrid(spec=grid_spec, cells=cells)
