"""
data/stores.py — Formats de fichiers
=====================================
Jeux de données et paramètres de réseaux (binaire versionné), scénarios
(JSON) et trajectoires (en-tête JSON + CSV). Toute relecture est exacte au bit.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from pathlib import Path

import numpy as np
import pandas as pd

from config import ArmSpec, ConfigError, GridSpec, SamplerConfig, from_dict, to_dict
from data.scenario import Dataset, frame_from_matrix, frame_to_matrix, spot_check
from engine.autodiff import Layer, LayerSpec, NetworkParams
from engine.geometry import CircleObstacle, GeometryError, Scenario
from engine.latent_planner import Trajectory, step_metrics

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DATASET_MAGIC = b"LPDS"
PARAMS_MAGIC = b"LPNP"

# Conteneur binaire (petit-boutiste) :
#   [0:4]    magic
#   [4:8]    u32 version
#   [8:12]   u32 longueur L de l'en-tête
#   [12:12+L]  en-tête JSON UTF-8 (contient "payload_len", en nombre de float64)
#   [..]     charge utile float64 '<f8'
#   [-4:]    u32 CRC32 de tout ce qui précède
_PREFIX = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


class StoreFormatError(ValueError):
    pass


class CorruptFileError(StoreFormatError):
    pass


class VersionError(StoreFormatError):
    pass


class SpecMismatchError(StoreFormatError):
    pass


# ──────────────────────────────────────────────
# Conteneur binaire
# ──────────────────────────────────────────────

def pack_container(magic: bytes, header: dict, payload: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(payload, dtype="<f8").ravel()
    head = json.dumps({**header, "payload_len": int(payload.size)}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(magic, FORMAT_VERSION, len(head)) + head + payload.tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def unpack_container(blob: bytes, magic: bytes) -> tuple[dict, np.ndarray]:
    """Vérifie magic, version (avant le CRC), longueurs puis CRC."""
    if len(blob) < _PREFIX.size + _CRC.size:
        raise CorruptFileError(f"Fichier tronqué ({len(blob)} octets).")
    found, version, head_len = _PREFIX.unpack_from(blob, 0)
    if found != magic:
        raise CorruptFileError(f"Signature inattendue {found!r} (attendu {magic!r}).")
    if version != FORMAT_VERSION:
        raise VersionError(f"Version de format {version} non supportée (attendu {FORMAT_VERSION}).")
    start = _PREFIX.size + head_len
    if start + _CRC.size > len(blob):
        raise CorruptFileError("En-tête tronqué.")
    (crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if zlib.crc32(blob[:-_CRC.size]) != crc:
        raise CorruptFileError("Somme de contrôle CRC32 invalide.")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"En-tête illisible : {exc}") from exc
    raw = blob[start:-_CRC.size]
    if len(raw) != 8 * header.get("payload_len", -1):
        raise CorruptFileError(f"Charge utile de {len(raw)} octets, attendu {8 * header.get('payload_len', 0)}.")
    return header, np.frombuffer(raw, dtype="<f8").astype(np.float64)


def _read(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except (IsADirectoryError, PermissionError) as exc:
        raise CorruptFileError(f"Lecture impossible de {path} : {exc}") from exc


# ──────────────────────────────────────────────
# Jeux de données
# ──────────────────────────────────────────────

def _obstacles_to_list(scenario: Scenario) -> list:
    return [[o.center[0], o.center[1], o.radius] for o in scenario.obstacles]


def _scenario_from_list(rows: list, grid: GridSpec, scenario_id: int) -> Scenario:
    return Scenario.build([CircleObstacle((x, y), r) for x, y, r in rows], grid, scenario_id)


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    n_cols = ds.arm.n_joints + 4
    header = {
        "kind": "dataset",
        "arm": to_dict(ds.arm),
        "sampler": to_dict(ds.sampler),
        "grid": to_dict(ds.grid_spec),
        "split": ds.split,
        "generator": ds.generator,
        "scenarios": [{"id": s.scenario_id, "obstacles": _obstacles_to_list(s)} for s in ds.scenarios],
        "n_samples": len(ds.samples),
        "n_cols": n_cols,
    }
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(pack_container(DATASET_MAGIC, header, frame_to_matrix(ds.arm, ds.samples)))
    logger.info("Jeu « %s » écrit : %s (%d postures)", ds.split, target, len(ds.samples))
    return target


def load_dataset(path: str | Path, check_fraction: float = 0.01) -> Dataset:
    """Relit un jeu ; les étiquettes d'une fraction des postures sont recalculées."""
    header, payload = unpack_container(_read(path), DATASET_MAGIC)
    try:
        arm = from_dict(ArmSpec, header["arm"], "arm")
        sampler = from_dict(SamplerConfig, header["sampler"], "sampler")
        grid = from_dict(GridSpec, header["grid"], "grid")
        scenarios = [_scenario_from_list(s["obstacles"], grid, int(s["id"])) for s in header["scenarios"]]
        matrix = payload.reshape(header["n_samples"], header["n_cols"])
        split = str(header["split"])
    except (KeyError, ValueError, TypeError, ConfigError, GeometryError) as exc:
        raise CorruptFileError(f"En-tête de jeu incohérent ({path}) : {exc}") from exc

    ds = Dataset(arm=arm, sampler=sampler, grid_spec=grid, split=split,
                 scenarios=scenarios, samples=frame_from_matrix(arm, matrix),
                 generator=header.get("generator", ""))
    if check_fraction > 0:
        mismatches = spot_check(ds, check_fraction)
        if mismatches:
            raise CorruptFileError(f"{mismatches} étiquette(s) en désaccord avec la géométrie ({path}).")
    return ds


def merge_datasets(a: Dataset, b: Dataset) -> Dataset:
    if a.arm != b.arm:
        raise SpecMismatchError("Fusion refusée : bras différents.")
    if a.grid_spec != b.grid_spec:
        raise SpecMismatchError("Fusion refusée : grilles différentes.")
    shared = a.scenario_ids & b.scenario_ids
    if shared:
        raise SpecMismatchError(f"Fusion refusée : scénarios en double {sorted(shared)[:5]}.")
    return Dataset(arm=a.arm, sampler=a.sampler, grid_spec=a.grid_spec, split=a.split,
                   scenarios=list(a.scenarios) + list(b.scenarios),
                   samples=pd.concat([a.samples, b.samples], ignore_index=True),
                   generator=a.generator)


# ──────────────────────────────────────────────
# Paramètres de réseaux
# ──────────────────────────────────────────────

def save_params(networks: dict[str, NetworkParams], path: str | Path) -> Path:
    """Table des couches dans l'en-tête puis W, b (et u, v si normalisée) par couche."""
    table, chunks = [], []
    for name, net in networks.items():
        table.append({"name": name, "gate_points": list(net.gate_points),
                      "layers": [to_dict(layer.spec) for layer in net.layers]})
        for layer in net.layers:
            chunks.extend((layer.weight.ravel(), layer.bias))
            if layer.spec.spectral_norm:
                chunks.extend((layer.u, layer.v))
    payload = np.concatenate(chunks) if chunks else np.zeros(0)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(pack_container(PARAMS_MAGIC, {"kind": "params", "networks": table}, payload))
    return target


def load_params(path: str | Path, template: dict[str, NetworkParams] | None = None) -> dict[str, NetworkParams]:
    header, payload = unpack_container(_read(path), PARAMS_MAGIC)
    out: dict[str, NetworkParams] = {}
    offset = 0

    def take(shape) -> np.ndarray:
        nonlocal offset
        size = int(np.prod(shape))
        if offset + size > len(payload):
            raise CorruptFileError("Charge utile trop courte pour la table des couches.")
        chunk = payload[offset:offset + size].reshape(shape).copy()
        offset += size
        return chunk

    try:
        for entry in header["networks"]:
            layers = []
            for spec_dict in entry["layers"]:
                spec = LayerSpec(**spec_dict)
                layer = Layer(spec, take((spec.out_dim, spec.in_dim)), take((spec.out_dim,)))
                if spec.spectral_norm:
                    layer.u, layer.v = take((spec.out_dim,)), take((spec.in_dim,))
                layers.append(layer)
            out[entry["name"]] = NetworkParams(layers, tuple(entry["gate_points"]))
    except StoreFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"Table des couches invalide : {exc}") from exc
    if offset != len(payload):
        raise CorruptFileError(f"{len(payload) - offset} valeur(s) en trop dans la charge utile.")

    if template is not None:
        _check_template(out, template)
    return out


def _check_template(found: dict[str, NetworkParams], template: dict[str, NetworkParams]) -> None:
    if set(found) != set(template):
        raise SpecMismatchError(f"Réseaux {sorted(found)} ≠ attendus {sorted(template)}.")
    for name, net in template.items():
        if net.specs() != found[name].specs() or tuple(net.gate_points) != found[name].gate_points:
            raise SpecMismatchError(f"Architecture incompatible pour « {name} ».")


# ──────────────────────────────────────────────
# Scénarios (JSON)
# ──────────────────────────────────────────────

def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "scenario_id": scenario.scenario_id,
        "grid": to_dict(scenario.grid.spec),
        "obstacles": [{"center": list(o.center), "radius": o.radius} for o in scenario.obstacles],
    }


def scenario_from_dict(data: dict) -> Scenario:
    try:
        grid = from_dict(GridSpec, data.get("grid", {}), "grid")
        obstacles = [CircleObstacle(tuple(o["center"]), o["radius"]) for o in data["obstacles"]]
        return Scenario.build(obstacles, grid, int(data.get("scenario_id", -1)))
    except (KeyError, TypeError, ValueError) as exc:
        raise StoreFormatError(f"Scénario invalide : {exc}") from exc


def save_scenario(scenario: Scenario, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(scenario_to_dict(scenario), indent=2) + "\n", encoding="utf-8")
    return target


def load_scenario(path: str | Path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StoreFormatError(f"Scénario illisible ({path}) : {exc}") from exc
    return scenario_from_dict(data)


# ──────────────────────────────────────────────
# Trajectoires (en-tête JSON + CSV)
# ──────────────────────────────────────────────

def trajectory_frame(traj: Trajectory) -> pd.DataFrame:
    n = traj.normalized.shape[1]
    cols = {"t": np.arange(traj.T)}
    if traj.latent is not None:
        cols.update({f"z{i}": traj.latent[:, i] for i in range(traj.latent.shape[1])})
    cols.update({f"qn{i}": traj.normalized[:, i] for i in range(n)})
    cols.update({f"q{i}": traj.radians[:, i] for i in range(n)})
    cols.update(step_metrics(traj.normalized))
    return pd.DataFrame(cols)


def save_trajectory(traj: Trajectory, arm: ArmSpec, path: str | Path,
                    scenario_id: int = -1, extra: dict | None = None) -> Path:
    header = {
        "arm": to_dict(arm),
        "scenario_id": scenario_id,
        "T": traj.T,
        "criterion": traj.criterion,
        "planner": traj.planner,
        "clamp_events": traj.clamp_events,
        "latent": traj.latent is not None,
        **(extra or {}),
    }
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    trajectory_frame(traj).to_csv(buf, index=False)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(buf.getvalue(), encoding="utf-8")
    return target


def load_trajectory(path: str | Path) -> tuple[Trajectory, dict]:
    """Retourne la trajectoire et l'en-tête (bras, scénario, critère…)."""
    text = Path(path).read_text(encoding="utf-8")
    first, _, body = text.partition("\n")
    if not first.startswith("# "):
        raise StoreFormatError(f"En-tête de trajectoire absent ({path}).")
    try:
        header = json.loads(first[2:])
        frame = pd.read_csv(io.StringIO(body), float_precision="round_trip")
        n = len(header["arm"]["link_lengths"])
        normalized = frame[[f"qn{i}" for i in range(n)]].to_numpy(dtype=np.float64)
        radians = frame[[f"q{i}" for i in range(n)]].to_numpy(dtype=np.float64)
        latent = frame[[f"z{i}" for i in range(n)]].to_numpy(dtype=np.float64) if header["latent"] else None
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise StoreFormatError(f"Trajectoire illisible ({path}) : {exc}") from exc
    if len(frame) != header["T"]:
        raise CorruptFileError(f"{len(frame)} lignes, T={header['T']} annoncé ({path}).")
    traj = Trajectory(normalized=normalized, radians=radians, latent=latent,
                      criterion=header["criterion"], planner=header["planner"],
                      clamp_events=int(header["clamp_events"]))
    return traj, header
