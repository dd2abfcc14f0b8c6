"""
engine/cgan.py — G / D / E conditionnés, fonctions de perte et boucle d'entraînement
=====================================================================================
Objectif alterné :
  (i)  D monte   λ_gan·L_GAN + λ_col·L_col
  (ii) G, E descendent λ_gan·(−log D(G(z,c),c)) + λ_rec·L_rec + λ_map·L_map
Les poids λ sont appliqués par échantillon (bande de clearance, collision obstacle).
Ce module ne fait aucune I/O : l'écriture des checkpoints passe par un callback.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
from scipy.special import expit

from config import ArchitectureConfig, TrainingConfig, CLEARANCE_SENTINEL, PROB_EPS
from data.scenario import Dataset
from engine.autodiff import (
    AdamState, GatedNetwork, NetworkParams, NonFiniteError,
    adam_step, backward_gated, forward_gated, make_gated_network,
)

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Perte non finie ou au-delà de la limite de divergence."""

    def __init__(self, step: int, terms: dict):
        self.step = step
        self.terms = terms
        shown = ", ".join(f"{k}={v:.3g}" for k, v in terms.items())
        super().__init__(f"Divergence à l'étape {step} : {shown}")


class EmptyBatchError(ValueError):
    """Lot vide là où au moins un échantillon est requis."""


# ──────────────────────────────────────────────
# Modèles
# ──────────────────────────────────────────────

@dataclass(eq=False)
class ModelBundle:
    G: GatedNetwork
    D: GatedNetwork
    E: GatedNetwork
    n_joints: int
    cond_dim: int
    arch: ArchitectureConfig

    def networks(self) -> dict[str, NetworkParams]:
        out = {}
        for prefix, net in (("G", self.G), ("D", self.D), ("E", self.E)):
            out.update({f"{prefix}.{name}": sub for name, sub in net.networks().items()})
        return out

    def refresh_spectral(self) -> None:
        for net in (self.G, self.D, self.E):
            net.refresh_spectral()


def build_bundle(n_joints: int, cond_dim: int, arch: ArchitectureConfig,
                 rng: np.random.Generator) -> ModelBundle:
    """Dimension latente = nombre d'articulations ; G et E de même forme, paramètres indépendants."""
    rg, rd, re = rng.spawn(3)
    return ModelBundle(
        G=make_gated_network(n_joints, n_joints, cond_dim, arch, rg),
        D=make_gated_network(n_joints, 1, cond_dim, arch, rd),
        E=make_gated_network(n_joints, n_joints, cond_dim, arch, re),
        n_joints=n_joints, cond_dim=cond_dim, arch=arch,
    )


def generate(bundle: ModelBundle, z, cond) -> np.ndarray:
    return forward_gated(bundle.G, z, cond)[0]


def encode_raw(bundle: ModelBundle, theta, cond) -> np.ndarray:
    return forward_gated(bundle.E, theta, cond)[0]


def discriminate(bundle: ModelBundle, theta, cond) -> np.ndarray:
    """Logits de D, forme (B,)."""
    out = forward_gated(bundle.D, np.atleast_2d(theta), np.atleast_2d(cond))[0]
    return out[:, 0]


# ──────────────────────────────────────────────
# Pertes
# ──────────────────────────────────────────────

def _log_prob(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """log D et sa dérivée par rapport au logit (nulle sur la zone écrêtée)."""
    p = expit(logits)
    clipped = (p < PROB_EPS) | (p > 1.0 - PROB_EPS)
    return np.log(np.clip(p, PROB_EPS, 1.0 - PROB_EPS)), np.where(clipped, 0.0, 1.0 - p)


def _log_one_minus(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = expit(logits)
    clipped = (p < PROB_EPS) | (p > 1.0 - PROB_EPS)
    return np.log(1.0 - np.clip(p, PROB_EPS, 1.0 - PROB_EPS)), np.where(clipped, 0.0, -p)


def loss_gan(d_real, d_fake) -> float:
    """mean log D(θ,c) + mean log(1 − D(G(z,c),c)), D écrêté à [ε, 1−ε]."""
    log_r, _ = _log_prob(np.asarray(d_real, dtype=np.float64))
    log_f, _ = _log_one_minus(np.asarray(d_fake, dtype=np.float64))
    return float(np.mean(log_r) + np.mean(log_f))


def _weights(weights, n: int) -> np.ndarray:
    return np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)


def loss_rec(bundle: ModelBundle, theta, z, cond, z_cond=None, weights=None) -> float:
    """
    mean ‖G(E(θ,c),c) − θ‖² + mean ‖E(G(z,c),c) − z‖².
    `weights` multiplie le terme en θ échantillon par échantillon.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if len(theta) == 0 or len(z) == 0:
        raise EmptyBatchError("L_rec : lot vide.")
    cond = np.atleast_2d(cond)
    z_cond = cond if z_cond is None else np.atleast_2d(z_cond)
    th_rec = generate(bundle, encode_raw(bundle, theta, cond), cond)
    z_rec = encode_raw(bundle, generate(bundle, z, z_cond), z_cond)
    w = _weights(weights, len(theta))
    return float(np.mean(w * np.sum((th_rec - theta) ** 2, axis=1))
                 + np.mean(np.sum((z_rec - z) ** 2, axis=1)))


def loss_map(bundle: ModelBundle, theta, cond, weights=None) -> float:
    """mean ‖G(z=θ, c) − θ‖² sur des postures libres."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if len(theta) == 0:
        raise EmptyBatchError("L_map : lot vide.")
    out = generate(bundle, theta, np.atleast_2d(cond))
    w = _weights(weights, len(theta))
    return float(np.mean(w * np.sum((out - theta) ** 2, axis=1)))


def loss_col(d_col, weights=None) -> float:
    """mean log(1 − D(θ_col, c)) ; lot vide → 0 avec avertissement."""
    d_col = np.asarray(d_col, dtype=np.float64).reshape(-1)
    if d_col.size == 0:
        logger.warning("L_col : aucun échantillon en collision dans le lot, terme nul")
        return 0.0
    log_c, _ = _log_one_minus(d_col)
    return float(np.mean(_weights(weights, d_col.size) * log_c))


def effective_lambdas(clearance, obstacle_colliding, cfg: TrainingConfig) -> dict[str, np.ndarray]:
    """
    Poids λ par échantillon :
    - λ_rec = λ_map = 0 si 0 ≤ clearance < clearance_threshold ;
    - λ_col = λ_col_boost si la posture touche un obstacle (l'auto-collision garde λ_col).
    """
    clearance = np.asarray(clearance, dtype=np.float64)
    obstacle = np.asarray(obstacle_colliding, dtype=bool)
    band = (clearance >= 0.0) & (clearance < cfg.clearance_threshold)
    lam_map = cfg.lambda_map if cfg.use_map else 0.0
    lam_col = cfg.lambda_col if cfg.use_col else 0.0
    boost = cfg.lambda_col_boost if cfg.use_col else 0.0
    shape = np.broadcast(clearance, obstacle).shape
    return {
        "gan": np.full(shape, cfg.lambda_gan),
        "rec": np.where(band, 0.0, cfg.lambda_rec),
        "map": np.where(band, 0.0, lam_map),
        "col": np.where(obstacle, boost, lam_col),
    }


# ──────────────────────────────────────────────
# Données d'entraînement & lots
# ──────────────────────────────────────────────

@dataclass(eq=False)
class TrainingData:
    grids: np.ndarray
    theta_free: np.ndarray
    scen_free: np.ndarray
    clearance_free: np.ndarray
    theta_col: np.ndarray
    scen_col: np.ndarray
    obstacle_col: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "TrainingData":
        index = {s.scenario_id: i for i, s in enumerate(ds.scenarios)}
        grids = np.stack([s.condition for s in ds.scenarios]) if ds.scenarios else np.zeros((0, ds.grid_spec.n_cells))
        q = ds.q_normalized()
        rows = ds.samples["scenario_id"].map(index).to_numpy(dtype=np.int64)
        invalid = ds.invalid_mask()
        free = ~invalid
        return cls(
            grids=grids,
            theta_free=q[free], scen_free=rows[free],
            clearance_free=ds.samples["clearance"].to_numpy(dtype=np.float64)[free],
            theta_col=q[invalid], scen_col=rows[invalid],
            obstacle_col=ds.samples["colliding"].to_numpy(dtype=bool)[invalid],
        )


@dataclass(eq=False)
class TrainingBatch:
    """Lot d'une étape ; les poids sont des multiplicateurs des λ nominaux."""
    theta: np.ndarray
    cond: np.ndarray
    z: np.ndarray
    col_theta: np.ndarray
    col_cond: np.ndarray
    rec_w: np.ndarray
    map_w: np.ndarray
    col_w: np.ndarray


def batch_weights(clearance, obstacle_colliding, cfg: TrainingConfig) -> tuple[np.ndarray, np.ndarray]:
    """(multiplicateur rec/map, multiplicateur col) : λ effectif = λ nominal × multiplicateur."""
    clearance = np.asarray(clearance, dtype=np.float64)
    obstacle = np.asarray(obstacle_colliding, dtype=bool)
    band = (clearance >= 0.0) & (clearance < cfg.clearance_threshold)
    free_w = np.where(band, 0.0, 1.0)
    nominal = cfg.lambda_col if cfg.use_col else 0.0
    if nominal > 0.0:
        lam_c = effective_lambdas(np.full(obstacle.shape, CLEARANCE_SENTINEL), obstacle, cfg)["col"]
        col_w = lam_c / nominal
    else:
        col_w = np.ones(obstacle.shape)
    return free_w, col_w


def sample_batch(data: TrainingData, cfg: TrainingConfig, rng: np.random.Generator,
                 n_joints: int) -> TrainingBatch:
    if len(data.theta_free) == 0:
        raise EmptyBatchError("Aucune posture libre dans le jeu d'entraînement.")
    b = cfg.batch_size
    i = rng.integers(0, len(data.theta_free), size=b)
    z = rng.random((b, n_joints))
    if len(data.theta_col):
        j = rng.integers(0, len(data.theta_col), size=b)
    else:
        j = np.zeros(0, dtype=np.int64)
    free_w, col_w = batch_weights(data.clearance_free[i], data.obstacle_col[j], cfg)
    return TrainingBatch(
        theta=data.theta_free[i], cond=data.grids[data.scen_free[i]], z=z,
        col_theta=data.theta_col[j], col_cond=data.grids[data.scen_col[j]],
        rec_w=free_w, map_w=free_w.copy(), col_w=col_w,
    )


# ──────────────────────────────────────────────
# Fonction de valeur & gradients
# ──────────────────────────────────────────────

def value_function(bundle: ModelBundle, batch: TrainingBatch, cfg: TrainingConfig) -> dict[str, float]:
    """V(D, G, E) en une passe : termes séparés et total Σ λ·L."""
    b = len(batch.theta)
    if b == 0:
        raise EmptyBatchError("Lot vide.")
    c = batch.cond
    z_hat = encode_raw(bundle, batch.theta, c)
    out = generate(bundle, np.vstack([batch.z, z_hat, batch.theta]), np.vstack([c, c, c]))
    fake, th_rec, th_map = out[:b], out[b:2 * b], out[2 * b:]
    z_rec = encode_raw(bundle, fake, c)
    logits = discriminate(bundle, np.vstack([batch.theta, fake, batch.col_theta]),
                          np.vstack([c, c, batch.col_cond]))
    l_gan = loss_gan(logits[:b], logits[b:2 * b])
    l_col = loss_col(logits[2 * b:], batch.col_w)
    l_rec = float(np.mean(batch.rec_w * np.sum((th_rec - batch.theta) ** 2, axis=1))
                  + np.mean(np.sum((z_rec - batch.z) ** 2, axis=1)))
    l_map = float(np.mean(batch.map_w * np.sum((th_map - batch.theta) ** 2, axis=1)))
    lam_map = cfg.lambda_map if cfg.use_map else 0.0
    lam_col = cfg.lambda_col if cfg.use_col else 0.0
    total = (cfg.lambda_gan * l_gan + cfg.lambda_rec * l_rec
             + lam_map * l_map + lam_col * l_col)
    return {"gan": l_gan, "rec": l_rec, "map": l_map, "col": l_col, "total": total}


def discriminator_gradients(bundle: ModelBundle, batch: TrainingBatch, cfg: TrainingConfig):
    """Gradients de −(λ_gan·L_GAN + λ_col·L_col) par rapport à D ; G est figé."""
    b = len(batch.theta)
    bc = len(batch.col_theta)
    c = batch.cond
    fake = generate(bundle, batch.z, c)
    x = np.vstack([batch.theta, fake, batch.col_theta])
    cond = np.vstack([c, c, batch.col_cond])
    out, tape = forward_gated(bundle.D, x, cond)
    logits = out[:, 0]

    log_r, d_r = _log_prob(logits[:b])
    log_f, d_f = _log_one_minus(logits[b:2 * b])
    l_gan = float(np.mean(log_r) + np.mean(log_f))
    lam_col = cfg.lambda_col if cfg.use_col else 0.0
    if bc:
        log_c, d_c = _log_one_minus(logits[2 * b:])
        l_col = float(np.mean(batch.col_w * log_c))
        g_col = -lam_col * batch.col_w * d_c / bc
    else:
        logger.debug("Aucun échantillon en collision : L_col ignoré à cette étape")
        l_col, g_col = 0.0, np.zeros(0)

    dlogits = np.concatenate([-cfg.lambda_gan * d_r / b, -cfg.lambda_gan * d_f / b, g_col])
    grads = backward_gated(tape, dlogits[:, None])

    p = expit(logits)
    terms = {
        "loss_d": -(cfg.lambda_gan * l_gan + lam_col * l_col),
        "loss_gan": l_gan,
        "loss_col": l_col,
        "acc_real": float(np.mean(p[:b] >= 0.5)),
        "acc_fake": float(np.mean(p[b:2 * b] < 0.5)),
        "acc_col": float(np.mean(p[2 * b:] < 0.5)) if bc else float("nan"),
    }
    return terms, grads.arrays()


def generator_gradients(bundle: ModelBundle, batch: TrainingBatch, cfg: TrainingConfig):
    """
    Gradients de λ_gan·(−log D(G(z))) + λ_rec·L_rec + λ_map·L_map
    par rapport à G et E. Retourne (termes, gradients G, gradients E).
    """
    b = len(batch.theta)
    c = batch.cond
    lam_map = cfg.lambda_map if cfg.use_map else 0.0

    z_hat, tape_e1 = forward_gated(bundle.E, batch.theta, c)
    out, tape_g = forward_gated(bundle.G, np.vstack([batch.z, z_hat, batch.theta]), np.vstack([c, c, c]))
    fake, th_rec, th_map = out[:b], out[b:2 * b], out[2 * b:]
    z_rec, tape_e2 = forward_gated(bundle.E, fake, c)
    d_out, tape_d = forward_gated(bundle.D, fake, c)

    log_f, d_f = _log_prob(d_out[:, 0])
    err_th = np.sum((th_rec - batch.theta) ** 2, axis=1)
    err_z = np.sum((z_rec - batch.z) ** 2, axis=1)
    err_map = np.sum((th_map - batch.theta) ** 2, axis=1)
    l_g = float(-np.mean(log_f))
    l_rec = float(np.mean(batch.rec_w * err_th) + np.mean(err_z))
    l_map = float(np.mean(batch.map_w * err_map))

    # Non saturant : G descend −log D(G(z, c), c)
    g_d = backward_gated(tape_d, (-cfg.lambda_gan * d_f / b)[:, None])
    g_e2 = backward_gated(tape_e2, cfg.lambda_rec * 2.0 * (z_rec - batch.z) / b)
    d_fake = g_d.inputs + g_e2.inputs
    d_rec = cfg.lambda_rec * 2.0 * batch.rec_w[:, None] * (th_rec - batch.theta) / b
    d_map = lam_map * 2.0 * batch.map_w[:, None] * (th_map - batch.theta) / b
    g_g = backward_gated(tape_g, np.vstack([d_fake, d_rec, d_map]))
    g_e1 = backward_gated(tape_e1, g_g.inputs[b:2 * b])

    grads_e = [a + e for a, e in zip(g_e1.arrays(), g_e2.arrays())]
    terms = {
        "loss_g": l_g,
        "loss_rec": l_rec,
        "loss_map": l_map,
        "loss_ge": cfg.lambda_gan * l_g + cfg.lambda_rec * l_rec + lam_map * l_map,
        "rec_err_theta": float(np.mean(err_th)),
        "rec_err_z": float(np.mean(err_z)),
    }
    return terms, g_g.arrays(), grads_e


# ──────────────────────────────────────────────
# Boucle d'entraînement
# ──────────────────────────────────────────────

@dataclass
class TrainingLog:
    """Enregistrements par intervalle, en ajout seulement."""
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(dict(record))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.records)

    def __len__(self) -> int:
        return len(self.records)


@dataclass(eq=False)
class TrainingState:
    bundle: ModelBundle
    adam_d: AdamState
    adam_ge: AdamState
    rng: np.random.Generator
    step: int = 0
    log: TrainingLog = field(default_factory=TrainingLog)


def ge_parameters(bundle: ModelBundle) -> list[np.ndarray]:
    return bundle.G.parameters() + bundle.E.parameters()


def init_training_state(dataset: Dataset, cfg: TrainingConfig,
                        arch: ArchitectureConfig | None = None) -> TrainingState:
    """Modèles et optimiseurs neufs ; initialisation et tirage des lots sur des flux séparés."""
    arch = arch or ArchitectureConfig()
    init_ss, data_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    bundle = build_bundle(dataset.arm.n_joints, dataset.grid_spec.n_cells, arch,
                          np.random.Generator(np.random.PCG64(init_ss)))
    return TrainingState(
        bundle=bundle,
        adam_d=AdamState.for_params(bundle.D.parameters(), cfg.lr_d, cfg.beta1, cfg.beta2),
        adam_ge=AdamState.for_params(ge_parameters(bundle), cfg.lr_ge, cfg.beta1, cfg.beta2),
        rng=np.random.Generator(np.random.PCG64(data_ss)),
    )


def _diverged(terms: dict, limit: float) -> bool:
    values = np.array([v for k, v in terms.items() if k.startswith("loss")], dtype=np.float64)
    return bool(np.any(~np.isfinite(values)) or np.any(np.abs(values) > limit))


def train_step(state: TrainingState, data: TrainingData, cfg: TrainingConfig) -> dict:
    bundle = state.bundle
    batch = sample_batch(data, cfg, state.rng, bundle.n_joints)
    d_terms, d_grads = discriminator_gradients(bundle, batch, cfg)
    adam_step(bundle.D.parameters(), d_grads, state.adam_d)
    bundle.D.refresh_spectral()
    g_terms, g_grads, e_grads = generator_gradients(bundle, batch, cfg)
    adam_step(ge_parameters(bundle), g_grads + e_grads, state.adam_ge)
    bundle.G.refresh_spectral()
    bundle.E.refresh_spectral()
    state.step += 1
    return {**d_terms, **g_terms}


CheckpointFn = Callable[[TrainingState, str], None]


def train(dataset: Dataset, cfg: TrainingConfig, arch: ArchitectureConfig | None = None,
          state: TrainingState | None = None, checkpoint_fn: CheckpointFn | None = None):
    """
    Entraîne jusqu'à cfg.steps étapes (reprise possible depuis `state`).
    Retourne (ModelBundle, TrainingLog). Divergence → checkpoint de diagnostic
    puis TrainingDivergedError.
    """
    state = state or init_training_state(dataset, cfg, arch)
    data = TrainingData.from_dataset(dataset)
    if len(data.theta_col) == 0:
        logger.warning("Jeu sans posture en collision : L_col restera nul")

    with np.errstate(over="ignore", invalid="ignore"):
        while state.step < cfg.steps:
            try:
                terms = train_step(state, data, cfg)
            except NonFiniteError as exc:
                terms = {"loss_nonfinite": float("nan")}
                logger.error("Gradient non fini à l'étape %d : %s", state.step, exc)
            if _diverged(terms, cfg.divergence_limit):
                if checkpoint_fn is not None:
                    checkpoint_fn(state, "diverged")
                raise TrainingDivergedError(state.step, terms)

            if state.step % cfg.log_interval == 0 or state.step == cfg.steps:
                state.log.append({"step": state.step, **terms})
                logger.info("Étape %d/%d : loss_d=%.4f loss_g=%.4f rec=%.5f map=%.5f col=%.4f",
                            state.step, cfg.steps, terms["loss_d"], terms["loss_g"],
                            terms["loss_rec"], terms["loss_map"], terms["loss_col"])
            if checkpoint_fn is not None and state.step % cfg.checkpoint_interval == 0:
                checkpoint_fn(state, "periodic")

    return state.bundle, state.log


def evaluate_discrimination(bundle: ModelBundle, dataset: Dataset, chunk: int = 4096) -> dict:
    """Exactitude de D par classe (D ≥ 0.5 ⇒ « libre ») ; classe absente → None."""
    data = TrainingData.from_dataset(dataset)

    def accuracy(theta, scen, want_free: bool):
        if len(theta) == 0:
            return None
        hits = 0
        for k in range(0, len(theta), chunk):
            p = expit(discriminate(bundle, theta[k:k + chunk], data.grids[scen[k:k + chunk]]))
            hits += int(np.sum((p >= 0.5) == want_free))
        return hits / len(theta)

    return {"free": accuracy(data.theta_free, data.scen_free, True),
            "colliding": accuracy(data.theta_col, data.scen_col, False)}
