"""
test_geometry.py — Cinématique, collisions et grille d'occupation
=================================================================
Framework : pytest

4 suites :
  1. Cinématique directe (positions connues, lots)
  2. Collisions obstacle / auto-collision, clearance signée
  3. Vérification de chemins (attribution des violations, compteur d'appels)
  4. Rastérisation de la grille d'occupation
"""

import math

import numpy as np
import pytest

from config import ArmSpec, GridSpec, CLEARANCE_SENTINEL
from engine.geometry import (
    CircleObstacle,
    CollisionChecker,
    GeometryError,
    Scenario,
    check_config,
    check_configs,
    check_path,
    configs_checked,
    edge_subdivisions,
    end_effector,
    forward_kinematics,
    forward_kinematics_batch,
    rasterize,
    segment_clearance,
)

ARM = ArmSpec()
GRID = GridSpec()


def _scene(*circles) -> Scenario:
    return Scenario.build([CircleObstacle(c, r) for c, r in circles], GRID, scenario_id=7)


# ═══════════════════════════════════════════════
# SUITE 1 : CINÉMATIQUE DIRECTE
# ═══════════════════════════════════════════════

class TestForwardKinematics:

    @pytest.mark.parametrize("q, tip", [
        ((0.0, 0.0), (2.0, 0.0)),
        ((math.pi / 2, 0.0), (0.0, 2.0)),
        ((0.0, math.pi / 2), (1.0, 1.0)),
        ((math.pi, 0.0), (-2.0, 0.0)),
    ])
    def test_end_effector_positions(self, q, tip):
        pts = forward_kinematics(ARM, q)
        assert pts.shape == (3, 2)
        assert np.allclose(pts[0], [0.0, 0.0])
        assert np.allclose(pts[-1], tip, atol=1e-12)

    def test_elbow_joint_positions(self):
        pts = forward_kinematics(ARM, (math.pi / 2, -math.pi / 2))
        assert np.allclose(pts, [[0.0, 0.0], [0.0, 1.0], [1.0, 1.0]], atol=1e-12)

    def test_base_offset_translates_every_joint(self):
        arm = ArmSpec(base=(0.5, -0.25))
        shifted = forward_kinematics(arm, (0.3, -0.7))
        plain = forward_kinematics(ARM, (0.3, -0.7))
        assert np.allclose(shifted - plain, np.tile([0.5, -0.25], (3, 1)))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        qs = rng.uniform(-math.pi, math.pi, size=(16, 2))
        batch = forward_kinematics_batch(ARM, qs)
        assert batch.shape == (16, 3, 2)
        for q, pts in zip(qs, batch):
            assert np.allclose(forward_kinematics(ARM, q), pts)
        assert np.allclose(end_effector(ARM, qs), batch[:, -1, :])

    def test_link_lengths_are_preserved(self):
        arm = ArmSpec(link_lengths=(0.7, 1.3), joint_min=(-3.0, -3.0), joint_max=(3.0, 3.0))
        pts = forward_kinematics(arm, (1.1, -2.2))
        assert np.linalg.norm(pts[1] - pts[0]) == pytest.approx(0.7)
        assert np.linalg.norm(pts[2] - pts[1]) == pytest.approx(1.3)

    def test_wrong_dimension_rejected(self):
        with pytest.raises(GeometryError):
            forward_kinematics(ARM, (0.1, 0.2, 0.3))
        with pytest.raises(GeometryError):
            forward_kinematics(ARM, np.zeros((2, 2)))

    def test_non_finite_rejected(self):
        with pytest.raises(GeometryError):
            forward_kinematics_batch(ARM, [[np.nan, 0.0]])


# ═══════════════════════════════════════════════
# SUITE 2 : COLLISIONS
# ═══════════════════════════════════════════════

class TestCollisions:

    def test_segment_clearance_is_signed(self):
        obs = CircleObstacle((1.0, 1.0), 0.5)
        assert segment_clearance((0.0, 0.0), (2.0, 0.0), obs) == pytest.approx(0.5)
        inside = CircleObstacle((1.0, 0.1), 0.5)
        assert segment_clearance((0.0, 0.0), (2.0, 0.0), inside) == pytest.approx(-0.4)

    def test_segment_clearance_uses_endpoint_beyond_projection(self):
        obs = CircleObstacle((3.0, 0.0), 0.5)
        assert segment_clearance((0.0, 0.0), (2.0, 0.0), obs) == pytest.approx(0.5)

    def test_segment_clearance_is_symmetric(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            p0, p1, center = rng.uniform(-2.0, 2.0, size=(3, 2))
            obs = CircleObstacle(tuple(center), float(rng.uniform(0.1, 0.5)))
            assert segment_clearance(p0, p1, obs) == pytest.approx(segment_clearance(p1, p0, obs), abs=1e-12)

    def test_straight_arm_hits_obstacle_on_x_axis(self):
        check = check_config(ARM, _scene(((1.5, 0.0), 0.2)), (0.0, 0.0))
        assert check.colliding
        assert check.clearance == pytest.approx(-0.2)
        assert not check.self_colliding
        assert not check.free

    def test_raised_arm_is_clear(self):
        check = check_config(ARM, _scene(((1.5, 0.0), 0.2)), (math.pi / 2, 0.0))
        assert not check.colliding
        assert check.clearance == pytest.approx(1.3)
        assert check.free

    def test_empty_world_uses_sentinel(self):
        out = check_configs(ARM, _scene(), np.zeros((4, 2)))
        assert np.all(out["clearance"] == CLEARANCE_SENTINEL)
        assert not out["colliding"].any()

    def test_clearance_is_minimum_over_obstacles(self):
        scene = _scene(((0.0, 1.5), 0.3), ((0.0, -1.0), 0.2))
        check = check_config(ARM, scene, (0.0, 0.0))
        assert check.clearance == pytest.approx(0.8)

    def test_two_link_arm_never_self_collides(self):
        qs = np.random.default_rng(0).uniform(-math.pi, math.pi, size=(200, 2))
        assert not check_configs(ARM, _scene(), qs)["self_colliding"].any()

    def test_three_link_arm_folding_back_self_collides(self):
        arm = ArmSpec(link_lengths=(1.0, 1.0, 1.0), joint_min=(-math.pi,) * 3, joint_max=(math.pi,) * 3)
        folded = check_config(arm, _scene(), (0.0, 2.8, 2.8))
        straight = check_config(arm, _scene(), (0.0, 0.0, 0.0))
        assert folded.self_colliding and not folded.free
        assert not straight.self_colliding

    def test_check_config_requires_single_configuration(self):
        with pytest.raises(GeometryError):
            check_config(ARM, _scene(), np.zeros((2, 2)))

    def test_invalid_radius_rejected(self):
        with pytest.raises(GeometryError):
            CircleObstacle((0.0, 0.0), 0.0)
        with pytest.raises(GeometryError):
            CircleObstacle((0.0, 0.0), -1.0)


# ═══════════════════════════════════════════════
# SUITE 3 : CHEMINS
# ═══════════════════════════════════════════════

class TestPaths:

    @pytest.mark.parametrize("dist, step, expected", [
        (0.01, 0.05, 1),
        (0.05, 0.05, 1),
        (0.06, 0.05, 2),
        (0.3, 0.05, 8),
        (math.pi, 0.05, 64),
    ])
    def test_edge_subdivisions_power_of_two(self, dist, step, expected):
        k = edge_subdivisions(np.zeros(2), np.array([dist, 0.0]), step)
        assert k == expected
        assert dist / k <= step

    def test_free_path_reports_all_checked_postures(self):
        path = np.array([[-math.pi / 2, 0.0], [math.pi / 2, 0.0]])
        result = check_path(ARM, _scene(), path, step=0.05)
        assert not result.colliding
        assert result.first_bad_index is None and result.last_bad_index is None
        assert result.n_checked == 2 + 63
        assert not result.bad.any()

    def test_collision_inside_edge_marks_both_neighbours(self):
        path = np.array([[-math.pi / 2, 0.0], [math.pi / 2, 0.0]])
        result = check_path(ARM, _scene(((1.5, 0.0), 0.2)), path, step=0.05)
        assert result.colliding
        assert result.first_bad_index == 0
        assert result.last_bad_index == 1
        assert result.bad.tolist() == [True, True]

    def test_violation_near_start_attributed_to_start(self):
        # Collision pour |q1| < 0.27 environ : seulement au début de la première arête
        path = np.array([[0.0, 0.0], [math.pi / 2, 0.0], [math.pi, 0.0]])
        result = check_path(ARM, _scene(((1.5, 0.0), 0.4)), path, step=0.05)
        assert result.bad.tolist() == [True, False, False]

    def test_checker_counts_every_configuration(self):
        checker = CollisionChecker(ARM, _scene(), resolution=0.05)
        checker.check((0.0, 0.0))
        checker.check_batch(np.zeros((5, 2)))
        assert checker.calls == 6
        checker.check_path(np.array([[0.0, 0.0], [0.3, 0.0]]))
        assert checker.calls == 6 + 2 + 7

    def test_finer_step_never_clears_a_colliding_path(self):
        scene = _scene(((1.5, 0.0), 0.2), ((-0.3, 1.2), 0.3))
        rng = np.random.default_rng(21)
        flagged = 0
        for _ in range(40):
            path = rng.uniform(-math.pi, math.pi, size=(3, 2))
            coarse = check_path(ARM, scene, path, step=0.4)
            fine = check_path(ARM, scene, path, step=0.2)
            finer = check_path(ARM, scene, path, step=0.1)
            if coarse.colliding:
                flagged += 1
                assert fine.colliding and finer.colliding
            if fine.colliding:
                assert finer.colliding
            assert np.all(finer.bad >= fine.bad) and np.all(fine.bad >= coarse.bad)
        assert flagged > 0

    def test_thread_tally_counts_batch_rows(self):
        before = configs_checked()
        check_configs(ARM, _scene(((1.5, 0.0), 0.2)), np.zeros((9, 2)))
        check_config(ARM, _scene(), (0.1, 0.2))
        assert configs_checked() - before == 10

    def test_edge_free_detects_crossing(self):
        checker = CollisionChecker(ARM, _scene(((1.5, 0.0), 0.2)))
        assert checker.edge_free((0.5, 0.0), (1.5, 0.0))
        assert not checker.edge_free((-0.5, 0.0), (0.5, 0.0))

    def test_empty_path_rejected(self):
        with pytest.raises(GeometryError):
            check_path(ARM, _scene(), np.zeros((0, 2)))

    def test_non_positive_resolution_rejected(self):
        with pytest.raises(GeometryError):
            CollisionChecker(ARM, _scene(), resolution=0.0)


# ═══════════════════════════════════════════════
# SUITE 4 : GRILLE D'OCCUPATION
# ═══════════════════════════════════════════════

class TestRasterize:

    def test_small_disc_marks_single_cell(self):
        grid = rasterize([CircleObstacle((0.5, 0.5), 0.1)], GridSpec(4, 4, (-2.0, 2.0, -2.0, 2.0)))
        assert grid.cells.shape == (4, 4)
        assert grid.cells.sum() == 1.0
        assert grid.cells[2, 2] == 1.0

    def test_disc_touching_cell_corner_is_conservative(self):
        # Disque centré sur un coin commun : les quatre cellules voisines sont marquées
        grid = rasterize([CircleObstacle((0.0, 0.0), 0.05)], GridSpec(4, 4, (-2.0, 2.0, -2.0, 2.0)))
        assert grid.cells.sum() == 4.0
        assert grid.cells[1:3, 1:3].min() == 1.0

    def test_idempotent_and_order_independent(self):
        obstacles = [CircleObstacle((1.0, 0.5), 0.3), CircleObstacle((-0.7, -1.1), 0.25),
                     CircleObstacle((0.2, 1.6), 0.4)]
        first = rasterize(obstacles, GRID).cells
        assert np.array_equal(rasterize(obstacles, GRID).cells, first)
        assert np.array_equal(rasterize(obstacles[::-1], GRID).cells, first)
        assert np.array_equal(rasterize(obstacles + obstacles[:1], GRID).cells, first)

    @staticmethod
    def _subsampled(obstacles, spec: GridSpec, per_cell: int = 100) -> np.ndarray:
        xmin, xmax, ymin, ymax = spec.bounds
        xs = xmin + (np.arange(spec.width * per_cell) + 0.5) * (xmax - xmin) / (spec.width * per_cell)
        ys = ymin + (np.arange(spec.height * per_cell) + 0.5) * (ymax - ymin) / (spec.height * per_cell)
        X, Y = np.meshgrid(xs, ys)
        inside = np.zeros(X.shape, dtype=bool)
        for obs in obstacles:
            inside |= (X - obs.center[0]) ** 2 + (Y - obs.center[1]) ** 2 <= obs.radius ** 2
        return inside.reshape(spec.height, per_cell, spec.width, per_cell).any(axis=(1, 3))

    def test_small_disc_matches_subsampling(self):
        obstacles = [CircleObstacle((0.0, 0.0), 0.1)]
        cells = rasterize(obstacles, GRID).cells
        assert np.array_equal(cells.astype(bool), self._subsampled(obstacles, GRID))
        assert cells.sum() == 4.0

    def test_raster_covers_every_subsampled_point(self):
        obstacles = [CircleObstacle((1.0, 0.5), 0.3), CircleObstacle((-0.7, -1.1), 0.25)]
        cells = rasterize(obstacles, GRID).cells.astype(bool)
        sampled = self._subsampled(obstacles, GRID)
        assert not np.any(sampled & ~cells)
        assert sampled.sum() >= 0.8 * cells.sum()

    def test_condition_vector_is_flat_row_major(self):
        scene = _scene(((1.0, 1.0), 0.3))
        assert scene.condition.shape == (GRID.n_cells,)
        assert np.array_equal(scene.condition, scene.grid.cells.reshape(-1))
        assert set(np.unique(scene.condition)) <= {0.0, 1.0}

    def test_empty_world_is_all_free(self):
        assert _scene().condition.sum() == 0.0

    def test_scenarios_compare_by_content(self):
        a = _scene(((1.0, 1.0), 0.3))
        b = _scene(((1.0, 1.0), 0.3))
        c = _scene(((1.0, -1.0), 0.3))
        assert a == b
        assert a != c

    def test_centroid_defaults_without_obstacles(self):
        assert _scene().centroid(default=(0.1, 0.2)).tolist() == [0.1, 0.2]
        two = _scene(((1.0, 0.0), 0.2), ((0.0, 1.0), 0.2))
        assert two.centroid().tolist() == pytest.approx([0.5, 0.5])
