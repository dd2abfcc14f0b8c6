"""
test_latent_planner.py — Planification dans l'espace latent
===========================================================
Framework : pytest + unittest.mock

Les réseaux G et E sont remplacés par des couches linéaires connues
(identité ou homothétie) pour des résultats exacts.

4 suites :
  1. Encodage / décodage (cube unité, écrêtage)
  2. Chemins latents et métriques de régularité
  3. Optimisation (extrémités fixes, perte décroissante)
  4. Pipeline et critère de succès
"""

import math
from unittest.mock import patch

import numpy as np
import pytest

from config import ArchitectureConfig, ArmSpec, GridSpec, OptimizationConfig
from data.scenario import denormalize, normalize
from engine.autodiff import (
    ConditionExtractor, GatedNetwork, Layer, LayerSpec, NetworkParams, identity_network,
)
from engine.cgan import ModelBundle
from engine.geometry import CircleObstacle, Scenario
from engine.latent_planner import (
    LatentPath,
    LatentPlanError,
    Trajectory,
    anchor_endpoints,
    decode,
    decode_counted,
    encode,
    line_path,
    metrics,
    optimize,
    plan_latent,
    smoothness_cost,
    step_metrics,
    success_check,
    verify_anchored,
)

ARM = ArmSpec()
GRID = GridSpec()
THETA_S = normalize(ARM, (-math.pi / 2, 0.0))
THETA_G = normalize(ARM, (math.pi / 2, 0.0))


def _linear(n_in: int, n_out: int, weight: np.ndarray) -> NetworkParams:
    return NetworkParams([Layer(LayerSpec(n_in, n_out, "linear"), weight, np.zeros(n_out))])


def _gated(body: NetworkParams, cond_dim: int) -> GatedNetwork:
    trunk = _linear(cond_dim, 1, np.zeros((1, cond_dim)))
    return GatedNetwork(body=body, extractor=ConditionExtractor(trunk=trunk, heads=[]))


def _bundle(g_scale: float = 1.0) -> ModelBundle:
    cond_dim = GRID.n_cells
    return ModelBundle(
        G=_gated(_linear(2, 2, g_scale * np.eye(2)), cond_dim),
        D=_gated(_linear(2, 1, np.zeros((1, 2))), cond_dim),
        E=_gated(identity_network(2), cond_dim),
        n_joints=2, cond_dim=cond_dim, arch=ArchitectureConfig(),
    )


def _scene(*circles) -> Scenario:
    return Scenario.build([CircleObstacle(c, r) for c, r in circles], GRID, scenario_id=3)


# ═══════════════════════════════════════════════
# SUITE 1 : ENCODAGE / DÉCODAGE
# ═══════════════════════════════════════════════

class TestEncoding:

    def test_identity_roundtrip_is_exact(self):
        bundle, cond = _bundle(), _scene().condition
        theta = np.array([[0.1, 0.9], [0.5, 0.5]])
        assert np.array_equal(decode(bundle, encode(bundle, theta, cond), cond), theta)

    def test_single_posture_keeps_shape(self):
        bundle, cond = _bundle(), _scene().condition
        assert encode(bundle, np.array([0.2, 0.3]), cond).shape == (2,)

    def test_out_of_cube_input_rejected(self):
        bundle, cond = _bundle(), _scene().condition
        with pytest.raises(LatentPlanError):
            encode(bundle, np.array([1.2, 0.3]), cond)
        with pytest.raises(LatentPlanError):
            decode(bundle, np.array([0.2, -0.1]), cond)

    def test_wrong_dimension_rejected(self):
        with pytest.raises(LatentPlanError):
            encode(_bundle(), np.array([0.2, 0.3, 0.4]), _scene().condition)

    def test_decoder_output_is_clamped_and_counted(self, caplog):
        bundle, cond = _bundle(g_scale=2.0), _scene().condition
        theta, events = decode_counted(bundle, np.array([[0.8, 0.2]]), cond)
        assert theta.tolist() == [[1.0, 0.4]]
        assert events == 1
        assert "ramenée" in caplog.text


# ═══════════════════════════════════════════════
# SUITE 2 : CHEMINS ET MÉTRIQUES
# ═══════════════════════════════════════════════

class TestPathsAndMetrics:

    def test_line_path_endpoints_are_exact(self):
        z_s, z_g = np.array([0.1, 0.7]), np.array([0.9, 0.3])
        path = line_path(z_s, z_g, T=7)
        assert path.T == 7
        assert np.array_equal(path.points[0], z_s)
        assert np.array_equal(path.points[-1], z_g)
        assert np.allclose(np.diff(path.points, axis=0), (z_g - z_s) / 6)

    def test_line_path_needs_two_points(self):
        with pytest.raises(LatentPlanError):
            line_path(np.zeros(2), np.ones(2), T=1)

    def test_latent_path_outside_cube_rejected(self):
        with pytest.raises(LatentPlanError):
            LatentPath(points=np.array([[0.0, 0.0], [1.5, 0.0]]))

    def test_step_metrics_on_uniform_line(self):
        steps = step_metrics(np.linspace([0.0, 0.0], [1.0, 1.0], 5))
        assert steps["v2"].tolist() == [0.0, 0.125, 0.125, 0.125, 0.125]
        assert np.all(steps["a2"] == 0.0)
        assert np.all(steps["j2"] == 0.0)

    def test_undefined_orders_are_zero(self):
        steps = step_metrics(np.array([[0.0, 0.0], [0.5, 0.0]]))
        assert steps["v2"].tolist() == [0.0, 0.25]
        assert steps["a2"].tolist() == [0.0, 0.0]
        assert steps["j2"].tolist() == [0.0, 0.0]

    def test_metrics_lengths(self):
        traj = Trajectory.from_normalized(ARM, np.linspace([0.0, 0.0], [1.0, 1.0], 5))
        m = metrics(traj, ARM)
        assert m.joint_length == pytest.approx(2.0 * math.sqrt(2.0) * math.pi)
        assert m.sum_v2 == pytest.approx(0.5)
        assert m.sum_a2 == pytest.approx(0.0)
        assert m.defined == (True, True, True)
        assert m.ee_length > 0.0

    def test_metrics_flags_short_paths(self):
        traj = Trajectory.from_normalized(ARM, np.array([[0.2, 0.2], [0.3, 0.3]]))
        assert metrics(traj, ARM).defined == (True, False, False)
        with pytest.raises(LatentPlanError):
            metrics(Trajectory.from_normalized(ARM, np.array([[0.2, 0.2]])), ARM)

    def test_trajectory_views_agree(self):
        q = np.array([[-1.0, 0.5], [0.2, 2.0]])
        traj = Trajectory.from_radians(ARM, q, planner="rrt")
        assert np.allclose(denormalize(ARM, traj.normalized), q)
        assert traj.planner == "rrt" and traj.T == 2

    def test_smoothness_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        theta = rng.random((6, 2))
        weights = (1.0, 0.5, 0.25)
        _, grad = smoothness_cost(theta, weights)
        h = 1e-6
        numeric = np.zeros_like(theta)
        for idx in np.ndindex(theta.shape):
            plus, minus = theta.copy(), theta.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = (smoothness_cost(plus, weights)[0] - smoothness_cost(minus, weights)[0]) / (2 * h)
        assert np.allclose(grad, numeric, rtol=1e-6, atol=1e-8)

    @pytest.mark.parametrize("criterion, weights", [
        ("velocity", (1.0, 0.0, 0.0)),
        ("acceleration", (0.0, 1.0, 0.0)),
        ("jerk", (0.0, 0.0, 1.0)),
        ("mixed", (1.0, 0.5, 0.25)),
    ])
    def test_criterion_weights(self, criterion, weights):
        assert OptimizationConfig(criterion=criterion, alpha=0.5, beta=0.25).weights() == weights


# ═══════════════════════════════════════════════
# SUITE 3 : OPTIMISATION
# ═══════════════════════════════════════════════

class TestOptimization:

    def _wobbly_path(self) -> LatentPath:
        points = line_path(np.array([0.2, 0.3]), np.array([0.8, 0.6]), T=12).points.copy()
        noise = np.random.default_rng(4).uniform(-0.05, 0.05, size=(10, 2))
        points[1:-1] = np.clip(points[1:-1] + noise, 0.0, 1.0)
        return LatentPath(points=points)

    @pytest.mark.parametrize("criterion", ["velocity", "acceleration", "jerk", "mixed"])
    def test_loss_decreases_and_endpoints_fixed(self, criterion):
        path = self._wobbly_path()
        cfg = OptimizationConfig(criterion=criterion, iterations=300, lr=1e-2)
        out = optimize(_bundle(), path, _scene().condition, cfg)
        assert out.loss < out.initial_loss
        assert np.array_equal(out.points[0], path.points[0])
        assert np.array_equal(out.points[-1], path.points[-1])
        assert out.points.min() >= 0.0 and out.points.max() <= 1.0
        assert out.iterations == 300 and out.error is None

    def test_straight_line_cannot_get_worse(self):
        path = line_path(np.array([0.2, 0.3]), np.array([0.8, 0.6]), T=10)
        out = optimize(_bundle(), path, _scene().condition, OptimizationConfig(iterations=50))
        assert out.loss <= out.initial_loss

    def test_two_point_path_is_returned_unchanged(self):
        path = line_path(np.array([0.2, 0.3]), np.array([0.8, 0.6]), T=2)
        out = optimize(_bundle(), path, _scene().condition, OptimizationConfig(iterations=10))
        assert np.array_equal(out.points, path.points)
        assert out.iterations == 0


# ═══════════════════════════════════════════════
# SUITE 4 : PIPELINE ET SUCCÈS
# ═══════════════════════════════════════════════

class TestPipeline:

    def test_plan_uses_no_collision_checks(self):
        with patch("engine.geometry.check_configs") as checks:
            plan = plan_latent(_bundle(), ARM, _scene(((1.5, 0.0), 0.2)), THETA_S, THETA_G, T=20)
        checks.assert_not_called()
        assert plan.trajectory.T == 20
        assert plan.trajectory.planner == "latent"
        assert plan.trajectory.criterion == "none"
        assert plan.elapsed >= 0.0

    def test_identity_plan_is_joint_space_line(self):
        plan = plan_latent(_bundle(), ARM, _scene(), THETA_S, THETA_G, T=11)
        traj = plan.trajectory
        assert np.array_equal(traj.normalized[0], THETA_S)
        assert np.array_equal(traj.normalized[-1], THETA_G)
        assert np.allclose(traj.normalized, np.linspace(THETA_S, THETA_G, 11))
        assert np.allclose(traj.radians, denormalize(ARM, traj.normalized))

    def test_optimized_plan_records_criterion(self):
        cfg = OptimizationConfig(criterion="jerk", iterations=5)
        plan = plan_latent(_bundle(), ARM, _scene(), THETA_S, THETA_G, T=8, opt_cfg=cfg)
        assert plan.trajectory.criterion == "jerk"
        assert plan.path.iterations == 5

    def test_clamp_events_reported(self):
        plan = plan_latent(_bundle(g_scale=2.0), ARM, _scene(), THETA_S, THETA_G, T=10)
        assert plan.trajectory.clamp_events > 0
        assert plan.trajectory.normalized.max() <= 1.0

    def test_success_in_free_world(self):
        bundle, scene = _bundle(), _scene()
        traj = plan_latent(bundle, ARM, scene, THETA_S, THETA_G, T=30).trajectory
        verdict = success_check(ARM, bundle, scene, THETA_S, THETA_G, traj, eps=0.1)
        assert verdict.success and verdict.collision_free
        assert verdict.reasons == ()
        assert verdict.start_error == 0.0 and verdict.goal_error == 0.0

    def test_collision_is_reported(self):
        bundle, scene = _bundle(), _scene(((1.5, 0.0), 0.2))
        traj = plan_latent(bundle, ARM, scene, THETA_S, THETA_G, T=30).trajectory
        verdict = success_check(ARM, bundle, scene, THETA_S, THETA_G, traj, eps=0.1)
        assert not verdict.success and not verdict.collision_free
        assert verdict.reasons == ("collision",)

    def test_reconstruction_error_is_reported(self):
        # G = 2·Id : θ_rec ≠ θ, l'effecteur s'éloigne de la cible
        bundle, scene = _bundle(g_scale=2.0), _scene()
        traj = plan_latent(bundle, ARM, scene, THETA_S, THETA_G, T=10).trajectory
        verdict = success_check(ARM, bundle, scene, THETA_S, THETA_G, traj, eps=0.1)
        assert "start-reconstruction" in verdict.reasons
        assert "goal-reconstruction" in verdict.reasons
        assert verdict.start_error > 0.1

    def test_epsilon_must_be_positive(self):
        bundle, scene = _bundle(), _scene()
        traj = plan_latent(bundle, ARM, scene, THETA_S, THETA_G, T=5).trajectory
        with pytest.raises(ValueError):
            success_check(ARM, bundle, scene, THETA_S, THETA_G, traj, eps=0.0)

    def test_anchoring_adds_exact_endpoints(self):
        traj = plan_latent(_bundle(g_scale=2.0), ARM, _scene(), THETA_S, THETA_G, T=10).trajectory
        anchored = anchor_endpoints(ARM, traj, THETA_S, THETA_G)
        assert anchored.T == traj.T + 2
        assert np.array_equal(anchored.radians[0], denormalize(ARM, THETA_S))
        assert np.array_equal(anchored.radians[-1], denormalize(ARM, THETA_G))
        assert anchored.latent.shape == (12, 2)
        assert verify_anchored(ARM, _scene(), anchored, denormalize(ARM, THETA_S), denormalize(ARM, THETA_G))

    def test_verify_anchored_rejects_wrong_endpoint(self):
        traj = plan_latent(_bundle(), ARM, _scene(), THETA_S, THETA_G, T=10).trajectory
        assert not verify_anchored(ARM, _scene(), traj, denormalize(ARM, THETA_S), np.zeros(2))
