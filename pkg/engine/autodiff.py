"""
engine/autodiff.py — Noyau différentiable minimal (numpy, float64)
==================================================================
Couches affines, Leaky ReLU, portes multiplicatives par élément,
normalisation spectrale à vecteurs persistants, rétro-propagation exacte,
Adam et vérification par différences finies.

Conventions :
- poids de forme (out, in), entrées en lots (B, in) ;
- une couche « gated » multiplie sa sortie activée par un vecteur de porte ;
- la normalisation spectrale utilise σ = uᵀWv avec (u, v) persistants,
  mis à jour uniquement par refresh_spectral() ; le backward dérive W/σ
  exactement à (u, v) fixés.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from config import ArchitectureConfig, LEAKY_SLOPE, ADAM_BETA1, ADAM_BETA2, ADAM_EPS

logger = logging.getLogger(__name__)

ACTIVATIONS = ("leaky_relu", "linear")


class ShapeMismatchError(ValueError):
    """Dimensions incompatibles entre entrée, paramètres ou gradients."""


class NonFiniteError(ValueError):
    """Valeur NaN ou infinie dans une entrée ou un gradient."""


class TapeReuseError(RuntimeError):
    """Un enregistrement ne supporte qu'une seule passe arrière."""


# ──────────────────────────────────────────────
# Paramètres
# ──────────────────────────────────────────────

@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "leaky_relu"
    slope: float = LEAKY_SLOPE
    spectral_norm: bool = False

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ShapeMismatchError(f"Dimensions de couche invalides : {self.in_dim}→{self.out_dim}.")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Activation inconnue : {self.activation}.")
        if not 0.0 < self.slope < 1.0:
            raise ValueError(f"Pente Leaky ReLU hors de (0, 1) : {self.slope}.")


@dataclass(eq=False)
class Layer:
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray
    u: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass(eq=False)
class NetworkParams:
    layers: list[Layer]
    gate_points: tuple[int, ...] = ()

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.spec.out_dim != nxt.spec.in_dim:
                raise ShapeMismatchError(
                    f"Couches incompatibles : {prev.spec.out_dim} → {nxt.spec.in_dim}.")
        for g in self.gate_points:
            if not 0 <= g < len(self.layers):
                raise ShapeMismatchError(f"Point de porte {g} hors du réseau.")

    @property
    def in_dim(self) -> int:
        return self.layers[0].spec.in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].spec.out_dim

    def parameters(self) -> list[np.ndarray]:
        """Tableaux entraînables, dans l'ordre (W0, b0, W1, b1, …)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            layers=[Layer(l.spec, l.weight.copy(), l.bias.copy(),
                          None if l.u is None else l.u.copy(),
                          None if l.v is None else l.v.copy()) for l in self.layers],
            gate_points=tuple(self.gate_points))


def init_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    """Initialisation He (normale), biais nuls ; (u, v) après une itération de puissance."""
    weight = rng.normal(0.0, np.sqrt(2.0 / spec.in_dim), size=(spec.out_dim, spec.in_dim))
    bias = np.zeros(spec.out_dim)
    layer = Layer(spec, weight, bias)
    if spec.spectral_norm:
        u0 = rng.normal(size=spec.out_dim)
        res = spectral_normalize(weight, power_iters=1, u=u0 / np.linalg.norm(u0))
        layer.u, layer.v = res.u, res.v
    return layer


def make_mlp(in_dim: int, hidden: int, out_dim: int, n_hidden: int,
             rng: np.random.Generator, *, slope: float = LEAKY_SLOPE,
             gate_points: Sequence[int] = (), spectral: bool = True) -> NetworkParams:
    """
    Perceptron : n_hidden couches cachées Leaky ReLU puis une sortie linéaire.
    La première couche cachée n'est jamais normalisée ; les suivantes le sont si `spectral`.
    """
    specs = []
    dim = in_dim
    for k in range(n_hidden):
        specs.append(LayerSpec(dim, hidden, "leaky_relu", slope, spectral_norm=spectral and k > 0))
        dim = hidden
    specs.append(LayerSpec(dim, out_dim, "linear", slope, spectral_norm=False))
    return NetworkParams([init_layer(s, rng) for s in specs], tuple(gate_points))


def identity_network(n: int) -> NetworkParams:
    """Une couche linéaire identité n→n."""
    return NetworkParams([Layer(LayerSpec(n, n, "linear"), np.eye(n), np.zeros(n))])


# ──────────────────────────────────────────────
# Normalisation spectrale
# ──────────────────────────────────────────────

class SpectralResult(NamedTuple):
    weight: np.ndarray
    sigma: float
    u: np.ndarray
    v: np.ndarray
    degenerate: bool


def spectral_normalize(weight: np.ndarray, power_iters: int = 1,
                       u: np.ndarray | None = None) -> SpectralResult:
    """
    Divise `weight` par son estimation de plus grande valeur singulière.
    `u` (vecteur gauche) est le point de départ persistant ; matrice nulle →
    poids inchangé et degenerate=True.
    """
    if power_iters < 1:
        raise ValueError("power_iters doit être ≥ 1.")
    weight = np.asarray(weight, dtype=np.float64)
    m, n = weight.shape
    if u is None:
        u = np.ones(m) / np.sqrt(m)
    v = np.zeros(n)
    for _ in range(power_iters):
        wv = weight.T @ u
        nv = np.linalg.norm(wv)
        if nv == 0.0:
            return SpectralResult(weight, 0.0, u, np.zeros(n), True)
        v = wv / nv
        wu = weight @ v
        nu = np.linalg.norm(wu)
        if nu == 0.0:
            return SpectralResult(weight, 0.0, u, v, True)
        u = wu / nu
    sigma = float(u @ weight @ v)
    return SpectralResult(weight / sigma, sigma, u, v, False)


def refresh_spectral(net: NetworkParams, power_iters: int = 1) -> None:
    """Une itération de puissance par couche normalisée, (u, v) mis à jour en place."""
    for layer in net.layers:
        if layer.spec.spectral_norm:
            res = spectral_normalize(layer.weight, power_iters, layer.u)
            if res.degenerate:
                logger.warning("Normalisation spectrale dégénérée (matrice nulle)")
                continue
            layer.u, layer.v = res.u, res.v


def _effective_weight(layer: Layer) -> tuple[np.ndarray, float]:
    if not layer.spec.spectral_norm:
        return layer.weight, 1.0
    sigma = float(layer.u @ layer.weight @ layer.v)
    return layer.weight / sigma, sigma


# ──────────────────────────────────────────────
# Forward / backward
# ──────────────────────────────────────────────

@dataclass(eq=False)
class Tape:
    net: NetworkParams
    squeeze: bool
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    gates: dict[int, np.ndarray] = field(default_factory=dict)
    weights: list[np.ndarray] = field(default_factory=list)
    sigmas: list[float] = field(default_factory=list)
    used: bool = False


@dataclass(eq=False)
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray
    gates: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        """Même ordre que NetworkParams.parameters()."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contient des valeurs non finies.")


def forward(net: NetworkParams, x, gates: Sequence[np.ndarray] | None = None):
    """
    Évalue le réseau sur un lot. Retourne (sortie, Tape).
    `gates` : un vecteur par point de porte, de forme (B, largeur) ou (largeur,).
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeMismatchError(f"Entrée {x.shape} incompatible avec in_dim={net.in_dim}.")
    _check_finite(x, "L'entrée")
    if gates is not None and len(gates) != len(net.gate_points):
        raise ShapeMismatchError(
            f"{len(gates)} portes fournies pour {len(net.gate_points)} points de porte.")

    gate_map = {}
    if gates is not None:
        for point, g in zip(net.gate_points, gates):
            g = np.asarray(g, dtype=np.float64)
            if g.shape[-1] != net.layers[point].spec.out_dim:
                raise ShapeMismatchError(f"Porte {g.shape} incompatible avec la couche {point}.")
            gate_map[point] = g

    tape = Tape(net=net, squeeze=squeeze, gates=gate_map)
    h = x
    for k, layer in enumerate(net.layers):
        w, sigma = _effective_weight(layer)
        a = h @ w.T + layer.bias
        if layer.spec.activation == "leaky_relu":
            s = np.where(a > 0.0, a, layer.spec.slope * a)
        else:
            s = a
        tape.inputs.append(h)
        tape.pre.append(a)
        tape.post.append(s)
        tape.weights.append(w)
        tape.sigmas.append(sigma)
        h = s * gate_map[k] if k in gate_map else s

    return (h[0] if squeeze else h), tape


def backward(tape: Tape, dy) -> Gradients:
    """Passe arrière exacte ; le Tape est consommé."""
    if tape.used:
        raise TapeReuseError("Tape déjà consommé par une passe arrière.")
    net = tape.net
    dy = np.asarray(dy, dtype=np.float64)
    if tape.squeeze and dy.ndim == 1:
        dy = dy[None, :]
    expected = tape.post[-1].shape
    if dy.shape != expected:
        raise ShapeMismatchError(f"Gradient de sortie {dy.shape} ≠ {expected}.")
    tape.used = True

    n_layers = len(net.layers)
    dws: list[np.ndarray] = [None] * n_layers
    dbs: list[np.ndarray] = [None] * n_layers
    dgates: dict[int, np.ndarray] = {}

    dh = dy
    for k in reversed(range(n_layers)):
        layer = net.layers[k]
        s = tape.post[k]
        if k in tape.gates:
            g = tape.gates[k]
            dg = dh * s
            dgates[k] = dg if g.ndim == 2 else dg.sum(axis=0)
            ds = dh * g
        else:
            ds = dh
        if layer.spec.activation == "leaky_relu":
            da = ds * np.where(tape.pre[k] > 0.0, 1.0, layer.spec.slope)
        else:
            da = ds
        w = tape.weights[k]
        dw_eff = da.T @ tape.inputs[k]
        if layer.spec.spectral_norm:
            sigma = tape.sigmas[k]
            # d(W/σ) avec σ = uᵀWv, (u, v) fixés
            dws[k] = (dw_eff - np.sum(dw_eff * w) * np.outer(layer.u, layer.v)) / sigma
        else:
            dws[k] = dw_eff
        dbs[k] = da.sum(axis=0)
        dh = da @ w

    dx = dh[0] if tape.squeeze else dh
    gate_list = [dgates[p] for p in net.gate_points] if tape.gates else []
    return Gradients(weights=dws, biases=dbs, inputs=dx, gates=gate_list)


# ──────────────────────────────────────────────
# Réseau conditionné par portes
# ──────────────────────────────────────────────

@dataclass(eq=False)
class ConditionExtractor:
    """Tronc partagé puis une tête linéaire par point de porte."""
    trunk: NetworkParams
    heads: list[NetworkParams]

    def networks(self) -> dict[str, NetworkParams]:
        out = {"trunk": self.trunk}
        out.update({f"head{i}": h for i, h in enumerate(self.heads)})
        return out


@dataclass(eq=False)
class GatedNetwork:
    body: NetworkParams
    extractor: ConditionExtractor

    def networks(self) -> dict[str, NetworkParams]:
        out = {"body": self.body}
        out.update(self.extractor.networks())
        return out

    def parameters(self) -> list[np.ndarray]:
        out = []
        for net in self.networks().values():
            out.extend(net.parameters())
        return out

    def refresh_spectral(self, power_iters: int = 1) -> None:
        for net in self.networks().values():
            refresh_spectral(net, power_iters)

    @property
    def in_dim(self) -> int:
        return self.body.in_dim

    @property
    def out_dim(self) -> int:
        return self.body.out_dim


def make_gated_network(in_dim: int, out_dim: int, cond_dim: int,
                       arch: ArchitectureConfig, rng: np.random.Generator) -> GatedNetwork:
    gate_points = tuple(g - 1 for g in arch.gate_layers)
    body = make_mlp(in_dim, arch.hidden_width, out_dim, arch.hidden_layers, rng,
                    slope=arch.slope, gate_points=gate_points)
    trunk = NetworkParams([init_layer(LayerSpec(cond_dim, arch.extractor_width, "leaky_relu", arch.slope), rng)])
    heads = [NetworkParams([init_layer(LayerSpec(arch.extractor_width, arch.hidden_width, "linear", arch.slope), rng)])
             for _ in gate_points]
    return GatedNetwork(body=body, extractor=ConditionExtractor(trunk=trunk, heads=heads))


@dataclass(eq=False)
class GatedTape:
    body: Tape
    trunk: Tape
    heads: list[Tape]


@dataclass(eq=False)
class GatedGradients:
    body: Gradients
    trunk: Gradients
    heads: list[Gradients]
    inputs: np.ndarray
    condition: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        """Même ordre que GatedNetwork.parameters()."""
        out = self.body.arrays() + self.trunk.arrays()
        for h in self.heads:
            out.extend(h.arrays())
        return out


def extract_gates(extractor: ConditionExtractor, condition):
    feats, trunk_tape = forward(extractor.trunk, condition)
    gates, head_tapes = [], []
    for head in extractor.heads:
        g, t = forward(head, feats)
        gates.append(g)
        head_tapes.append(t)
    return gates, trunk_tape, head_tapes


def forward_gated(net: GatedNetwork, x, condition):
    """Sortie du corps dont les couches cachées désignées sont multipliées par les portes."""
    x = np.asarray(x, dtype=np.float64)
    condition = np.asarray(condition, dtype=np.float64)
    if condition.ndim != x.ndim or (x.ndim == 2 and condition.shape[0] != x.shape[0]):
        raise ShapeMismatchError(f"Condition {condition.shape} incompatible avec l'entrée {x.shape}.")
    gates, trunk_tape, head_tapes = extract_gates(net.extractor, condition)
    y, body_tape = forward(net.body, x, gates)
    return y, GatedTape(body=body_tape, trunk=trunk_tape, heads=head_tapes)


def backward_gated(tape: GatedTape, dy) -> GatedGradients:
    body = backward(tape.body, dy)
    heads = [backward(t, dg) for t, dg in zip(tape.heads, body.gates)]
    dfeats = np.zeros_like(tape.trunk.post[-1])
    for h in heads:
        dfeats = dfeats + (h.inputs[None, :] if tape.trunk.squeeze else h.inputs)
    trunk = backward(tape.trunk, dfeats)
    return GatedGradients(body=body, trunk=trunk, heads=heads,
                          inputs=body.inputs, condition=trunk.inputs)


# ──────────────────────────────────────────────
# Adam
# ──────────────────────────────────────────────

@dataclass(eq=False)
class AdamState:
    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float,
                   beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                   eps: float = ADAM_EPS) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Mise à jour Adam avec correction de biais, en place. Gradient non fini → refus."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError(
            f"{len(params)} paramètres, {len(grads)} gradients, {len(state.m)} moments.")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeMismatchError(f"Gradient {np.shape(g)} ≠ paramètre {p.shape}.")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("Gradient non fini : pas Adam refusé.")

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ──────────────────────────────────────────────
# Vérification des gradients
# ──────────────────────────────────────────────

class BlockError(NamedTuple):
    name: str
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    blocks: list[BlockError]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(num / den) if den > 0 else 0.0


def _numeric_grad(f, arr: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(net, x, tolerance: float = 1e-6, gates=None, condition=None,
               rng: np.random.Generator | None = None, corrupt: bool = False,
               h: float = 1e-6) -> GradCheckReport:
    """
    Compare le backward aux différences centrales sur chaque bloc de paramètres,
    l'entrée et (si présentes) les portes ou la condition.
    Perte scalaire : Σ y ⊙ R avec R aléatoire fixé. `corrupt` fausse un gradient analytique.
    """
    rng = rng or np.random.Generator(np.random.PCG64(0))
    x = np.array(x, dtype=np.float64)
    gated = isinstance(net, GatedNetwork)
    if gated:
        condition = np.array(condition, dtype=np.float64)
        y, tape = forward_gated(net, x, condition)
    else:
        gates = None if gates is None else [np.array(g, dtype=np.float64) for g in gates]
        y, tape = forward(net, x, gates)
    proj = rng.normal(size=y.shape)

    def loss() -> float:
        out = forward_gated(net, x, condition)[0] if gated else forward(net, x, gates)[0]
        return float(np.sum(out * proj))

    if gated:
        grads = backward_gated(tape, proj)
        named = []
        for net_name, sub in net.networks().items():
            named.extend((f"{net_name}.{i}", p) for i, p in enumerate(sub.parameters()))
        analytic = grads.arrays()
        named.append(("input", x))
        analytic.append(grads.inputs)
        named.append(("condition", condition))
        analytic.append(grads.condition)
    else:
        grads = backward(tape, proj)
        named = [(f"param.{i}", p) for i, p in enumerate(net.parameters())]
        analytic = grads.arrays()
        named.append(("input", x))
        analytic.append(grads.inputs)
        for k, g in enumerate(gates or []):
            named.append((f"gate.{k}", g))
            analytic.append(grads.gates[k])

    if corrupt:
        analytic[0] = analytic[0] * 1.5 + 1.0

    blocks = [BlockError(name, _rel_error(a, _numeric_grad(loss, arr, h)))
              for (name, arr), a in zip(named, analytic)]
    worst = max((b.rel_error for b in blocks), default=0.0)
    return GradCheckReport(max_rel_error=worst, tolerance=tolerance, blocks=blocks)
