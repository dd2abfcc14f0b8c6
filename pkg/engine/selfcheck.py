"""
engine/selfcheck.py — Auto-vérifications
=========================================
Suites rapides, sans entraînement : gradients, normalisation spectrale,
géométrie par échantillonnage dense, décomposition de la fonction de valeur
et valeur de L_GAN pour un discriminateur à 0.5.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import svdvals

from config import ArchitectureConfig, ArmSpec, GridSpec, TrainingConfig
from engine.autodiff import grad_check, make_gated_network, make_mlp, spectral_normalize
from engine.cgan import (
    TrainingBatch, build_bundle, discriminate, generate, loss_col, loss_gan, loss_map, loss_rec, value_function,
)
from engine.geometry import CircleObstacle, Scenario, check_configs, forward_kinematics_batch

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-6
SIGMA_TOLERANCE = 1e-2
IDENTITY_TOLERANCE = 1e-12
GEOMETRY_CONFIGS = 1000
_TINY_ARCH = ArchitectureConfig(hidden_width=8, hidden_layers=3, extractor_width=6, gate_layers=(2, 3))


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# ──────────────────────────────────────────────
# Suites
# ──────────────────────────────────────────────

def _suite_gradients(rng: np.random.Generator, inject_fault: bool) -> tuple[bool, str]:
    mlp = make_mlp(3, 8, 2, 3, rng, gate_points=(1,))
    x = rng.normal(size=(4, 3))
    gates = [rng.normal(size=(4, 8))]
    plain = grad_check(mlp, x, GRAD_TOLERANCE, gates=gates, rng=rng, corrupt=inject_fault)

    gated = make_gated_network(2, 2, 5, _TINY_ARCH, rng)
    gated_report = grad_check(gated, rng.random((3, 2)), GRAD_TOLERANCE,
                              condition=rng.random((3, 5)), rng=rng)
    worst = max(plain.max_rel_error, gated_report.max_rel_error)
    return plain.passed and gated_report.passed, f"erreur relative max {worst:.2e}"


def _suite_spectral(rng: np.random.Generator, inject_fault: bool) -> tuple[bool, str]:
    worst = 0.0
    for shape in ((8, 8), (16, 5), (5, 16)):
        w = rng.normal(size=shape)
        res = spectral_normalize(w, power_iters=100)
        worst = max(worst, abs(res.sigma - svdvals(w)[0]))
    return worst < SIGMA_TOLERANCE, f"écart σ max {worst:.2e}"


def _dense_collision(arm: ArmSpec, scenario: Scenario, qs: np.ndarray, per_link: int) -> np.ndarray:
    pts = forward_kinematics_batch(arm, qs)
    t = np.linspace(0.0, 1.0, per_link)[None, None, :, None]
    samples = pts[:, :-1, None, :] + t * (pts[:, 1:, None, :] - pts[:, :-1, None, :])
    samples = samples.reshape(len(qs), -1, 2)
    hit = np.zeros(len(qs), dtype=bool)
    for obs in scenario.obstacles:
        d = np.linalg.norm(samples - np.asarray(obs.center), axis=2)
        hit |= np.any(d <= obs.radius, axis=1)
    return hit


def _suite_geometry(rng: np.random.Generator, inject_fault: bool) -> tuple[bool, str]:
    arm = ArmSpec()
    scenario = Scenario.build([CircleObstacle((1.2, 0.4), 0.35), CircleObstacle((-0.6, -1.1), 0.3)],
                              GridSpec(), scenario_id=0)
    qs = rng.uniform(arm.joint_min, arm.joint_max, size=(GEOMETRY_CONFIGS, arm.n_joints))
    labels = check_configs(arm, scenario, qs)
    dense = _dense_collision(arm, scenario, qs, per_link=1001)
    # contacts rasants exclus
    decided = np.abs(labels["clearance"]) > 1e-3
    agree = labels["colliding"][decided] == dense[decided]
    return bool(np.all(agree)), f"{int(agree.sum())}/{int(decided.sum())} configurations concordantes"


def _tiny_batch(rng: np.random.Generator, n_joints: int, cond_dim: int, b: int = 8) -> TrainingBatch:
    cond = (rng.random((b, cond_dim)) < 0.3).astype(np.float64)
    return TrainingBatch(
        theta=rng.random((b, n_joints)), cond=cond, z=rng.random((b, n_joints)),
        col_theta=rng.random((b, n_joints)), col_cond=cond[::-1].copy(),
        rec_w=(rng.random(b) < 0.8).astype(np.float64), map_w=np.ones(b),
        col_w=np.where(rng.random(b) < 0.5, 10.0, 1.0),
    )


def _suite_value_identity(rng: np.random.Generator, inject_fault: bool) -> tuple[bool, str]:
    cfg = TrainingConfig()
    bundle = build_bundle(2, 9, _TINY_ARCH, rng)
    batch = _tiny_batch(rng, 2, 9)
    v = value_function(bundle, batch, cfg)
    d_real = discriminate(bundle, batch.theta, batch.cond)
    d_fake = discriminate(bundle, generate(bundle, batch.z, batch.cond), batch.cond)
    parts = {
        "gan": loss_gan(d_real, d_fake),
        "rec": loss_rec(bundle, batch.theta, batch.z, batch.cond, weights=batch.rec_w),
        "map": loss_map(bundle, batch.theta, batch.cond, weights=batch.map_w),
        "col": loss_col(discriminate(bundle, batch.col_theta, batch.col_cond), batch.col_w),
    }
    recomposed = (cfg.lambda_gan * parts["gan"] + cfg.lambda_rec * parts["rec"]
                  + cfg.lambda_map * parts["map"] + cfg.lambda_col * parts["col"])
    gap = abs(v["total"] - recomposed) / max(1.0, abs(v["total"]))
    return gap <= IDENTITY_TOLERANCE, f"écart relatif {gap:.2e}"


def _suite_half_discriminator(rng: np.random.Generator, inject_fault: bool) -> tuple[bool, str]:
    value = loss_gan(np.zeros(8), np.zeros(8))
    return value == -2.0 * math.log(2.0), f"L_GAN = {value!r}"


SUITES: dict[str, Callable[[np.random.Generator, bool], tuple[bool, str]]] = {
    "gradients": _suite_gradients,
    "spectral-norm": _suite_spectral,
    "geometry": _suite_geometry,
    "value-identity": _suite_value_identity,
    "gan-half": _suite_half_discriminator,
}


def run_selfcheck(seed: int = 0, inject_fault: bool = False,
                  suites: tuple[str, ...] | None = None) -> list[SuiteResult]:
    """Exécute les suites dans l'ordre ; une exception compte comme un échec."""
    results = []
    for name in suites or tuple(SUITES):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, len(results)])))
        t0 = time.perf_counter()
        try:
            with np.errstate(all="ignore"):
                passed, detail = SUITES[name](rng, inject_fault)
        except Exception as exc:  # noqa: BLE001
            logger.exception("Suite %s interrompue", name)
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(SuiteResult(name, bool(passed), detail, time.perf_counter() - t0))
        logger.info("Suite %-15s %s (%s)", name, "OK" if passed else "ÉCHEC", detail)
    return results
