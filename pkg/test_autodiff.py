"""
test_autodiff.py — Différentiation automatique, normalisation spectrale, Adam
=============================================================================
Framework : pytest + scipy (oracles)

4 suites :
  1. Construction des réseaux (couches, portes, normalisation)
  2. Passe avant / arrière (gradients contre différences finies, erreurs)
  3. Normalisation spectrale (oracle par décomposition en valeurs singulières)
  4. Optimiseur Adam
"""

import numpy as np
import pytest
from scipy.linalg import svdvals
from scipy.stats import ortho_group

from config import ArchitectureConfig
from engine.autodiff import (
    AdamState,
    NonFiniteError,
    ShapeMismatchError,
    TapeReuseError,
    adam_step,
    backward,
    forward,
    forward_gated,
    grad_check,
    identity_network,
    make_gated_network,
    make_mlp,
    refresh_spectral,
    spectral_normalize,
)

TINY = ArchitectureConfig(hidden_width=8, hidden_layers=3, extractor_width=6, gate_layers=(2, 3))


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# ═══════════════════════════════════════════════
# SUITE 1 : CONSTRUCTION
# ═══════════════════════════════════════════════

class TestConstruction:

    def test_mlp_layer_layout(self):
        net = make_mlp(3, 8, 2, 4, _rng())
        assert len(net.layers) == 5
        assert net.in_dim == 3 and net.out_dim == 2
        assert [l.spec.activation for l in net.layers] == ["leaky_relu"] * 4 + ["linear"]

    def test_first_hidden_and_output_layers_not_normalized(self):
        net = make_mlp(3, 8, 2, 3, _rng())
        assert [l.spec.spectral_norm for l in net.layers] == [False, True, True, False]
        plain = make_mlp(3, 8, 2, 3, _rng(), spectral=False)
        assert not any(l.spec.spectral_norm for l in plain.layers)

    def test_parameters_are_weight_bias_pairs(self):
        net = make_mlp(3, 8, 2, 2, _rng())
        shapes = [p.shape for p in net.parameters()]
        assert shapes == [(8, 3), (8,), (8, 8), (8,), (2, 8), (2,)]

    def test_gated_network_heads_match_gate_layers(self):
        net = make_gated_network(2, 2, 5, TINY, _rng())
        assert net.body.gate_points == (1, 2)
        assert len(net.extractor.heads) == 2
        assert net.extractor.trunk.in_dim == 5
        assert all(h.out_dim == TINY.hidden_width for h in net.extractor.heads)
        assert set(net.networks()) == {"body", "trunk", "head0", "head1"}

    def test_gate_outside_network_rejected(self):
        with pytest.raises(ShapeMismatchError):
            make_mlp(3, 8, 2, 2, _rng(), gate_points=(5,))

    def test_copy_is_independent(self):
        net = make_mlp(3, 8, 2, 2, _rng())
        clone = net.copy()
        clone.layers[0].weight[0, 0] += 1.0
        assert net.layers[0].weight[0, 0] != clone.layers[0].weight[0, 0]


# ═══════════════════════════════════════════════
# SUITE 2 : PASSE AVANT / ARRIÈRE
# ═══════════════════════════════════════════════

class TestForwardBackward:

    def test_identity_network(self):
        x = _rng().normal(size=(4, 3))
        y, _ = forward(identity_network(3), x)
        assert np.array_equal(y, x)

    def test_single_sample_is_squeezed(self):
        net = make_mlp(3, 8, 2, 2, _rng())
        x = _rng(1).normal(size=3)
        y, tape = forward(net, x)
        assert y.shape == (2,)
        grads = backward(tape, np.ones(2))
        assert grads.inputs.shape == (3,)
        assert np.allclose(y, forward(net, x[None, :])[0][0])

    def test_unit_gates_leave_output_unchanged(self):
        net = make_mlp(3, 8, 2, 3, _rng(), gate_points=(1,))
        x = _rng(2).normal(size=(5, 3))
        gated, _ = forward(net, x, [np.ones((5, 8))])
        plain, _ = forward(net, x)
        assert np.array_equal(gated, plain)

    def test_mlp_gradients_match_finite_differences(self):
        rng = _rng(3)
        net = make_mlp(3, 8, 2, 3, rng, gate_points=(1,))
        report = grad_check(net, rng.normal(size=(4, 3)), 1e-6, gates=[rng.normal(size=(4, 8))], rng=rng)
        assert report.passed, report.blocks
        names = [b.name for b in report.blocks]
        assert "input" in names and "gate.0" in names

    def test_gated_network_gradients_match_finite_differences(self):
        rng = _rng(4)
        net = make_gated_network(2, 2, 5, TINY, rng)
        report = grad_check(net, rng.random((3, 2)), 1e-6, condition=rng.random((3, 5)), rng=rng)
        assert report.passed, report.blocks
        assert any(b.name == "condition" for b in report.blocks)

    def test_corrupted_gradient_is_detected(self):
        rng = _rng(5)
        net = make_mlp(3, 8, 2, 2, rng)
        report = grad_check(net, rng.normal(size=(4, 3)), 1e-6, rng=rng, corrupt=True)
        assert not report.passed
        assert report.max_rel_error > 1e-3

    def test_tape_cannot_be_reused(self):
        net = make_mlp(3, 8, 2, 2, _rng())
        _, tape = forward(net, np.zeros((2, 3)))
        backward(tape, np.ones((2, 2)))
        with pytest.raises(TapeReuseError):
            backward(tape, np.ones((2, 2)))

    def test_wrong_input_dimension(self):
        with pytest.raises(ShapeMismatchError):
            forward(make_mlp(3, 8, 2, 2, _rng()), np.zeros((2, 4)))

    def test_wrong_output_gradient_shape(self):
        _, tape = forward(make_mlp(3, 8, 2, 2, _rng()), np.zeros((2, 3)))
        with pytest.raises(ShapeMismatchError):
            backward(tape, np.ones((2, 3)))

    def test_gate_count_mismatch(self):
        net = make_mlp(3, 8, 2, 3, _rng(), gate_points=(1, 2))
        with pytest.raises(ShapeMismatchError):
            forward(net, np.zeros((2, 3)), [np.ones((2, 8))])

    def test_condition_batch_mismatch(self):
        net = make_gated_network(2, 2, 5, TINY, _rng())
        with pytest.raises(ShapeMismatchError):
            forward_gated(net, np.zeros((3, 2)), np.zeros((2, 5)))

    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            forward(make_mlp(3, 8, 2, 2, _rng()), np.array([[np.inf, 0.0, 0.0]]))


# ═══════════════════════════════════════════════
# SUITE 3 : NORMALISATION SPECTRALE
# ═══════════════════════════════════════════════

class TestSpectralNorm:

    def test_known_singular_values(self):
        u = ortho_group.rvs(6, random_state=1)
        v = ortho_group.rvs(4, random_state=2)
        w = u[:, :4] @ np.diag([5.0, 2.0, 1.0, 0.5]) @ v.T
        res = spectral_normalize(w, power_iters=100)
        assert res.sigma == pytest.approx(5.0, rel=1e-6)
        assert svdvals(res.weight)[0] == pytest.approx(1.0, rel=1e-6)
        assert not res.degenerate

    @pytest.mark.parametrize("shape", [(8, 8), (16, 5), (5, 16)])
    def test_random_matrices_against_svd(self, shape):
        w = _rng(7).normal(size=shape)
        res = spectral_normalize(w, power_iters=100)
        assert abs(res.sigma - svdvals(w)[0]) < 1e-2

    def test_zero_matrix_is_degenerate(self):
        res = spectral_normalize(np.zeros((3, 4)))
        assert res.degenerate
        assert np.array_equal(res.weight, np.zeros((3, 4)))

    def test_power_iterations_must_be_positive(self):
        with pytest.raises(ValueError):
            spectral_normalize(np.eye(3), power_iters=0)

    def test_refresh_updates_persistent_vectors(self):
        net = make_mlp(3, 8, 2, 3, _rng())
        before = net.layers[1].u.copy()
        for _ in range(50):
            refresh_spectral(net)
        assert not np.array_equal(before, net.layers[1].u)
        sigma = float(net.layers[1].u @ net.layers[1].weight @ net.layers[1].v)
        assert sigma == pytest.approx(svdvals(net.layers[1].weight)[0], rel=1e-2)


# ═══════════════════════════════════════════════
# SUITE 4 : ADAM
# ═══════════════════════════════════════════════

class TestAdam:

    def test_minimizes_quadratic(self):
        p = np.zeros(2)
        state = AdamState.for_params([p], lr=0.05)
        target = np.array([3.0, -1.0])
        for _ in range(1000):
            adam_step([p], [2.0 * (p - target)], state)
        assert np.abs(p - target).max() < 0.1
        assert state.step == 1000

    def test_first_step_moves_by_learning_rate(self):
        p = np.array([1.0])
        state = AdamState.for_params([p], lr=0.01)
        adam_step([p], [np.array([4.0])], state)
        assert p[0] == pytest.approx(0.99, abs=1e-6)

    def test_non_finite_gradient_refused(self):
        p = np.ones(3)
        state = AdamState.for_params([p], lr=0.1)
        with pytest.raises(NonFiniteError):
            adam_step([p], [np.array([1.0, np.nan, 0.0])], state)
        assert np.array_equal(p, np.ones(3))
        assert state.step == 0

    def test_shape_mismatch_refused(self):
        p = np.ones(3)
        state = AdamState.for_params([p], lr=0.1)
        with pytest.raises(ShapeMismatchError):
            adam_step([p], [np.ones(2)], state)
