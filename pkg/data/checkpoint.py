"""
data/checkpoint.py — Points de reprise de l'entraînement
=========================================================
Un dossier par checkpoint :
  params.bin           paramètres G, D, E (format binaire de data/stores.py)
  optimizer.npz        moments Adam des deux optimiseurs
  training.json        étape, architecture, configuration, état du générateur de lots
  training_log.jsonl   journal d'entraînement, une ligne par intervalle
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from config import ArchitectureConfig, TrainingConfig, from_dict, to_dict
from data.stores import CorruptFileError, SpecMismatchError, load_params, save_params
from engine.autodiff import AdamState, ConditionExtractor, GatedNetwork, NetworkParams
from engine.cgan import CheckpointFn, ModelBundle, TrainingLog, TrainingState

logger = logging.getLogger(__name__)

PARAMS_FILE = "params.bin"
OPTIMIZER_FILE = "optimizer.npz"
STATE_FILE = "training.json"
LOG_FILE = "training_log.jsonl"


def _gated_from(nets: dict[str, NetworkParams], prefix: str) -> GatedNetwork:
    heads = []
    while f"{prefix}.head{len(heads)}" in nets:
        heads.append(nets[f"{prefix}.head{len(heads)}"])
    try:
        return GatedNetwork(body=nets[f"{prefix}.body"],
                            extractor=ConditionExtractor(trunk=nets[f"{prefix}.trunk"], heads=heads))
    except KeyError as exc:
        raise SpecMismatchError(f"Réseau manquant dans le checkpoint : {exc}") from exc


def bundle_from_networks(nets: dict[str, NetworkParams], n_joints: int, cond_dim: int,
                         arch: ArchitectureConfig) -> ModelBundle:
    bundle = ModelBundle(G=_gated_from(nets, "G"), D=_gated_from(nets, "D"), E=_gated_from(nets, "E"),
                         n_joints=n_joints, cond_dim=cond_dim, arch=arch)
    if bundle.G.in_dim != n_joints or bundle.D.out_dim != 1 or bundle.E.out_dim != n_joints:
        raise SpecMismatchError("Dimensions des réseaux incohérentes avec le bras.")
    if bundle.G.extractor.trunk.in_dim != cond_dim:
        raise SpecMismatchError(f"Condition de dimension {bundle.G.extractor.trunk.in_dim}, attendu {cond_dim}.")
    return bundle


def _adam_meta(state: AdamState) -> dict:
    return {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "step": state.step}


def save_checkpoint(state: TrainingState, cfg: TrainingConfig, out_dir: str | Path,
                    reason: str = "periodic") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = state.bundle
    save_params(bundle.networks(), out / PARAMS_FILE)

    arrays = {}
    for tag, adam in (("d", state.adam_d), ("ge", state.adam_ge)):
        arrays.update({f"{tag}_m{i}": m for i, m in enumerate(adam.m)})
        arrays.update({f"{tag}_v{i}": v for i, v in enumerate(adam.v)})
    np.savez(out / OPTIMIZER_FILE, **arrays)

    meta = {
        "reason": reason,
        "step": state.step,
        "n_joints": bundle.n_joints,
        "cond_dim": bundle.cond_dim,
        "architecture": to_dict(bundle.arch),
        "training": to_dict(cfg),
        "adam": {"d": _adam_meta(state.adam_d), "ge": _adam_meta(state.adam_ge)},
        "rng_state": state.rng.bit_generator.state,
    }
    (out / STATE_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    log_path = out / LOG_FILE
    if len(state.log):
        state.log.to_frame().to_json(log_path, orient="records", lines=True, double_precision=15)
    else:
        log_path.write_text("", encoding="utf-8")
    logger.info("Checkpoint « %s » écrit à l'étape %d : %s", reason, state.step, out)
    return out


def _read_meta(ckpt_dir: Path) -> dict:
    try:
        return json.loads((ckpt_dir / STATE_FILE).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{STATE_FILE} illisible : {exc}") from exc


def load_bundle(ckpt_dir: str | Path) -> ModelBundle:
    """Modèles seuls, pour la planification."""
    ckpt_dir = Path(ckpt_dir)
    meta = _read_meta(ckpt_dir)
    arch = from_dict(ArchitectureConfig, meta["architecture"], "architecture")
    nets = load_params(ckpt_dir / PARAMS_FILE)
    return bundle_from_networks(nets, int(meta["n_joints"]), int(meta["cond_dim"]), arch)


def _restore_adam(meta: dict, arrays, tag: str, n_params: int) -> AdamState:
    try:
        m = [arrays[f"{tag}_m{i}"].copy() for i in range(n_params)]
        v = [arrays[f"{tag}_v{i}"].copy() for i in range(n_params)]
    except KeyError as exc:
        raise SpecMismatchError(f"Moments Adam incomplets ({tag}) : {exc}") from exc
    return AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
                     step=int(meta["step"]), m=m, v=v)


def load_checkpoint(ckpt_dir: str | Path, arch: ArchitectureConfig | None = None) -> tuple[TrainingState, TrainingConfig]:
    """
    Restaure l'état complet de l'entraînement. Si `arch` est donnée, elle doit
    correspondre à celle du checkpoint.
    """
    ckpt_dir = Path(ckpt_dir)
    meta = _read_meta(ckpt_dir)
    bundle = load_bundle(ckpt_dir)
    if arch is not None and arch != bundle.arch:
        raise SpecMismatchError("Architecture demandée différente de celle du checkpoint.")
    cfg = from_dict(TrainingConfig, meta["training"], "training")

    with np.load(ckpt_dir / OPTIMIZER_FILE) as arrays:
        adam_d = _restore_adam(meta["adam"]["d"], arrays, "d", len(bundle.D.parameters()))
        adam_ge = _restore_adam(meta["adam"]["ge"], arrays, "ge",
                                len(bundle.G.parameters()) + len(bundle.E.parameters()))

    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng_state"]

    log = TrainingLog()
    log_path = ckpt_dir / LOG_FILE
    if log_path.exists() and log_path.stat().st_size:
        for record in pd.read_json(log_path, orient="records", lines=True, precise_float=True).to_dict("records"):
            log.append(record)

    state = TrainingState(bundle=bundle, adam_d=adam_d, adam_ge=adam_ge, rng=rng,
                          step=int(meta["step"]), log=log)
    return state, cfg


def checkpoint_fn(out_dir: str | Path, cfg: TrainingConfig) -> CheckpointFn:
    """Rappel pour cgan.train : checkpoint courant dans out/checkpoint, diagnostic dans out/diverged."""
    out = Path(out_dir)

    def _save(state: TrainingState, reason: str) -> None:
        target = out / ("diverged" if reason == "diverged" else "checkpoint")
        save_checkpoint(state, cfg, target, reason)

    return _save
