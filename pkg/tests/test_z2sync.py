"""Sign-synchronization module: free energies, the tanh iteration,
Hessian spectra, and coverage accounting.

Hessians are checked two ways: explicitly assembled matrices against
the operator route, and both against finite differences of the analytic
gradients.
"""

import numpy as np
import pytest

from mfl.model import sample_z2
from mfl.z2sync import (
    Z2State,
    run_z2_nmf,
    z2_coverage,
    z2_hessian_min_eig,
    z2_nmf_free_energy,
    z2_nmf_gradient,
    z2_nmf_step,
    z2_tap_free_energy,
    z2_tap_gradient,
)


def dense_hessian(m, inst, tap):
    n = m.size
    H = -inst.lam * inst.X.copy()
    np.fill_diagonal(H, 0.0)
    H[np.diag_indices(n)] += 1.0 / (1.0 - m**2)
    if tap:
        Q = m @ m / n
        H += inst.lam**2 * (1.0 - Q) * np.eye(n)
        H -= (2.0 * inst.lam**2 / n) * np.outer(m, m)
    return H


class TestFreeEnergies:
    def test_values_at_origin(self):
        inst = sample_z2(150, 0.8, seed=1)
        m0 = np.zeros(150)
        np.testing.assert_allclose(z2_nmf_free_energy(m0, inst),
                                   -150.0 * np.log(2.0), atol=1e-10)
        np.testing.assert_allclose(
            z2_tap_free_energy(m0, inst),
            -150.0 * np.log(2.0) - 150.0 * 0.8**2 / 4.0, atol=1e-10)

    def test_flip_invariance(self):
        inst = sample_z2(100, 1.2, seed=2)
        m = np.random.default_rng(42).uniform(-0.9, 0.9, 100)
        np.testing.assert_allclose(z2_nmf_free_energy(-m, inst),
                                   z2_nmf_free_energy(m, inst))
        np.testing.assert_allclose(z2_tap_free_energy(-m, inst),
                                   z2_tap_free_energy(m, inst))

    def test_rejects_saturated_means(self):
        inst = sample_z2(10, 0.5, seed=0)
        bad = np.zeros(10)
        bad[3] = 1.0
        with pytest.raises(ValueError):
            z2_nmf_free_energy(bad, inst)
        with pytest.raises(ValueError):
            Z2State(m=bad)

    def test_gradients_vanish_at_origin(self):
        inst = sample_z2(80, 0.7, seed=3)
        m0 = np.zeros(80)
        np.testing.assert_allclose(z2_nmf_gradient(m0, inst), 0.0, atol=1e-15)
        np.testing.assert_allclose(z2_tap_gradient(m0, inst), 0.0, atol=1e-15)

    def test_gradients_match_finite_differences(self):
        inst = sample_z2(300, 0.8, seed=1)
        rng = np.random.default_rng(0)
        m = rng.uniform(-0.6, 0.6, 300)
        h = 1e-6
        for fe, gr in [(z2_nmf_free_energy, z2_nmf_gradient),
                       (z2_tap_free_energy, z2_tap_gradient)]:
            g = gr(m, inst)
            fd = np.empty(300)
            for i in range(300):
                e = np.zeros(300)
                e[i] = h
                fd[i] = (fe(m + e, inst) - fe(m - e, inst)) / (2.0 * h)
            rel = np.abs(fd - g) / np.maximum(np.abs(g), 1.0)
            assert rel.max() < 1e-5


class TestStep:
    def test_origin_is_fixed(self):
        inst = sample_z2(60, 0.9, seed=4)
        out = z2_nmf_step(np.zeros(60), inst)
        np.testing.assert_allclose(out.m, 0.0, atol=1e-15)

    def test_sign_flip_antisymmetry(self):
        inst = sample_z2(60, 0.9, seed=4)
        m = np.random.default_rng(1).uniform(-0.5, 0.5, 60)
        a = z2_nmf_step(m, inst).m
        b = z2_nmf_step(-m, inst).m
        np.testing.assert_allclose(b, -a, atol=1e-15)

    def test_subcritical_iteration_collapses(self):
        inst = sample_z2(2000, 0.4, seed=3)
        state, steps = run_z2_nmf(inst, iters=200, seed=4)
        assert np.linalg.norm(state.m) / np.sqrt(2000) < 1e-3
        assert steps < 200

    def test_supercritical_iteration_escapes(self):
        inst = sample_z2(2000, 0.75, seed=3)
        state, _ = run_z2_nmf(inst, iters=200, seed=4)
        assert state.m @ state.m / 2000 > 0.05


class TestHessian:
    def test_origin_hessian_is_shifted_data_matrix(self):
        # Closed form -lambda X0 + I, assembled independently.
        inst = sample_z2(200, 0.6, seed=5)
        H = dense_hessian(np.zeros(200), inst, tap=False)
        X0 = inst.X.copy()
        np.fill_diagonal(X0, 0.0)
        np.testing.assert_allclose(H, -0.6 * X0 + np.eye(200), atol=1e-12)
        np.testing.assert_allclose(
            z2_hessian_min_eig(np.zeros(200), inst, tap=False),
            np.linalg.eigvalsh(H)[0], atol=1e-10)

    def test_operator_route_matches_dense(self):
        inst = sample_z2(700, 0.9, seed=6)
        rng = np.random.default_rng(2)
        m = rng.uniform(-0.4, 0.4, 700)
        for tap in (False, True):
            direct = np.linalg.eigvalsh(dense_hessian(m, inst, tap))[0]
            np.testing.assert_allclose(
                z2_hessian_min_eig(m, inst, tap=tap), direct, atol=1e-5)

    def test_matches_gradient_finite_differences(self):
        inst = sample_z2(250, 0.8, seed=7)
        rng = np.random.default_rng(3)
        m = rng.uniform(-0.5, 0.5, 250)
        h = 1e-6
        for tap, grad in [(False, z2_nmf_gradient), (True, z2_tap_gradient)]:
            H = dense_hessian(m, inst, tap)
            for _ in range(5):
                v = rng.normal(size=250)
                v /= np.linalg.norm(v)
                fd = (grad(m + h * v, inst) - grad(m - h * v, inst)) / (2.0 * h)
                rel = np.abs(H @ v - fd).max() / np.abs(H @ v).max()
                assert rel < 1e-5

    def test_large_instance_eigenvalue_limits(self):
        np.testing.assert_allclose(
            z2_hessian_min_eig(np.zeros(3000), sample_z2(3000, 0.25, seed=2),
                               tap=False), 0.5, atol=0.05)
        np.testing.assert_allclose(
            z2_hessian_min_eig(np.zeros(3000), sample_z2(3000, 1.5, seed=2),
                               tap=False), -2.25, atol=0.2)
        np.testing.assert_allclose(
            z2_hessian_min_eig(np.zeros(3000), sample_z2(3000, 0.5, seed=2),
                               tap=True), 0.25, atol=0.1)


class TestCoverage:
    def test_origin_is_coin_flip(self):
        actual, claimed = z2_coverage(np.zeros(4), np.array([1.0, -1.0, 1.0, 1.0]))
        assert actual == 0.5
        assert claimed == 0.5

    def test_aligned_state_arithmetic(self):
        sigma = np.array([1.0, -1.0, 1.0, -1.0])
        actual, claimed = z2_coverage(0.8 * sigma, sigma)
        assert actual == 1.0
        np.testing.assert_allclose(claimed, 0.9)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            z2_coverage(np.zeros(3), np.ones(4))

    def test_overconfidence_gap_in_partial_regime(self):
        # Between lambda = 1/2 and 1 the iteration lands on states whose
        # claimed confidence outruns the true sign accuracy.
        wins = 0
        for sd in range(20):
            inst = sample_z2(2000, 0.75, seed=100 + sd)
            state, _ = run_z2_nmf(inst, iters=200, seed=sd)
            actual, claimed = z2_coverage(state, inst.sigma)
            if actual <= 0.55 and claimed >= 0.55:
                wins += 1
        assert wins >= 18
