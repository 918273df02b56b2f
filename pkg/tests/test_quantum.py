import numpy as np
import pytest
from hypothesis import given, strategies as st

from bangopt.models import SIGMA_X, SIGMA_Z, collective_spin, lmg_hamiltonian
from bangopt.quantum import (
    PROPAGATOR_DENSE_MAX_DIM,
    HermitianOperator,
    KrylovConvergenceError,
    StateVector,
    apply_propagator,
    apply_propagator_krylov,
    combine,
    fidelity,
    ground_state,
    propagator,
    spectral_gap,
)
from conftest import expm_oracle, random_hermitian


def random_state(rng, d):
    return StateVector(rng.normal(size=d) + 1j * rng.normal(size=d))


class TestStateVector:
    def test_normalized_on_construction(self):
        psi = StateVector([3.0, 4.0j])
        assert abs(np.linalg.norm(psi.amplitudes) - 1) < 1e-12
        assert psi.dim == 2

    def test_read_only(self):
        psi = StateVector([1.0, 0.0])
        with pytest.raises(ValueError):
            psi.amplitudes[0] = 2.0

    @pytest.mark.parametrize("bad", [[0.0, 0.0], [np.nan, 1.0], []])
    def test_rejects_degenerate_vectors(self, bad):
        with pytest.raises(ValueError):
            StateVector(bad)


class TestHermitianOperator:
    def test_rejects_non_hermitian(self):
        with pytest.raises(ValueError, match="Hermitian"):
            HermitianOperator([[0, 1], [2, 0]])

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            HermitianOperator(np.zeros((2, 3)))

    def test_eig_round_trip(self, rng):
        h = HermitianOperator(random_hermitian(rng, 9))
        w, v = h.eigh()
        assert np.all(np.diff(w) >= 0)
        assert np.allclose(v @ np.diag(w) @ v.conj().T, h.matrix, atol=1e-10, rtol=0)

    def test_banded_matches_dense(self, rng):
        d = 12
        bands = {0: rng.normal(size=d), 1: rng.normal(size=d - 1) + 1j * rng.normal(size=d - 1),
                 3: rng.normal(size=d - 3)}
        op = HermitianOperator.from_bands(d, bands)
        dense = HermitianOperator(op.matrix)
        x = rng.normal(size=d) + 1j * rng.normal(size=d)
        assert np.allclose(op.matvec(x), dense.matrix @ x, atol=1e-13)
        assert np.allclose(op.eigenvalues, dense.eigenvalues, atol=1e-12)
        assert op.norm_bound() >= np.max(np.abs(dense.eigenvalues)) - 1e-12

    @pytest.mark.parametrize("offsets", [(0, 1), (1,)])
    def test_real_tridiagonal_matches_dense(self, rng, offsets):
        d = 15
        op = HermitianOperator.from_bands(d, {k: rng.normal(size=d - k) for k in offsets})
        w, v = op.eigh()
        assert np.allclose(w, np.linalg.eigvalsh(op.matrix), atol=1e-12)
        assert np.allclose(v @ np.diag(w) @ v.T, op.matrix, atol=1e-12)

    def test_from_bands_validation(self):
        with pytest.raises(ValueError):
            HermitianOperator.from_bands(3, {0: np.ones(3), 1: np.ones(3)})
        with pytest.raises(ValueError, match="real"):
            HermitianOperator.from_bands(2, {0: np.array([1j, 0])})

    def test_lowest_matches_full_for_large_banded(self):
        h = lmg_hamiltonian(700, 1.0)
        w_part, v_part = h.lowest(2)
        w_full = np.linalg.eigvalsh(h.matrix)[:2]
        assert np.allclose(w_part, w_full, atol=1e-9)
        assert np.allclose(h.matvec(v_part[:, 0]), w_part[0] * v_part[:, 0], atol=1e-8)

    def test_pickle_round_trip(self):
        import pickle

        h = HermitianOperator(SIGMA_X)
        h.eigh()
        back = pickle.loads(pickle.dumps(h))
        assert np.allclose(back.eigenvalues, [-1, 1])


class TestCombine:
    def test_zero_coupling(self):
        h = combine(HermitianOperator(SIGMA_X), HermitianOperator(SIGMA_Z), 0.0)
        assert np.allclose(h.matrix, SIGMA_X)

    def test_unit_coupling_eigenvalues(self):
        h = combine(HermitianOperator(SIGMA_X), HermitianOperator(SIGMA_Z), 1.0)
        assert np.allclose(h.eigenvalues, [-np.sqrt(2), np.sqrt(2)], atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            combine(HermitianOperator(SIGMA_X), HermitianOperator(np.eye(3)), 1.0)

    @given(st.floats(-10, 10))
    def test_hermitian_for_any_coupling(self, g):
        sz = collective_spin(6, "z")
        sx = collective_spin(6, "x")
        m = combine(sz, sx, g).matrix
        assert np.allclose(m, m.conj().T, atol=1e-12)


class TestGroundStateAndGap:
    def test_sigma_z(self):
        gs = ground_state(HermitianOperator(SIGMA_Z))
        assert gs.energy == pytest.approx(-1.0)
        assert fidelity(gs.state, StateVector.basis(2, 1)) == pytest.approx(1.0)
        assert spectral_gap(HermitianOperator(SIGMA_Z)) == pytest.approx(2.0)

    def test_lz_energy(self):
        gs = ground_state(HermitianOperator(SIGMA_X - 5 * SIGMA_Z))
        assert gs.energy == pytest.approx(-np.sqrt(26), abs=1e-12)
        assert not gs.degenerate

    def test_eigen_equation(self, rng):
        h = HermitianOperator(random_hermitian(rng, 7))
        gs = ground_state(h)
        psi = gs.state.amplitudes
        assert np.allclose(h.matrix @ psi, gs.energy * psi, atol=1e-10)

    def test_degeneracy_flag(self):
        gs = ground_state(HermitianOperator(np.diag([0.0, 0.0, 1.0])))
        assert gs.degenerate

    def test_gap_needs_two_levels(self):
        with pytest.raises(ValueError):
            spectral_gap(HermitianOperator([[1.0]]))


class TestPropagator:
    def test_zero_time_is_identity(self, rng):
        u = propagator(HermitianOperator(random_hermitian(rng, 4)), 0.0)
        assert np.allclose(u.matrix, np.eye(4), atol=1e-14)

    def test_half_period_sigma_z(self):
        u = propagator(HermitianOperator(SIGMA_Z), np.pi)
        assert np.allclose(u.matrix, -np.eye(2), atol=1e-12)

    def test_matches_independent_expm(self, rng):
        a = random_hermitian(rng, 8)
        u = propagator(HermitianOperator(a), 0.37)
        assert np.max(np.abs(u.matrix - expm_oracle(-1j * 0.37 * a))) < 1e-10

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_composition_and_unitarity(self, t1, t2):
        h = HermitianOperator(random_hermitian(np.random.default_rng(3), 6))
        u = propagator(h, t1 + t2)
        assert u.unitarity_error() < 1e-10
        assert np.allclose(u.matrix, (propagator(h, t2) @ propagator(h, t1)).matrix, atol=1e-10)

    def test_apply_matches_matrix(self, rng):
        h = HermitianOperator(random_hermitian(rng, 5))
        psi = random_state(rng, 5)
        out = apply_propagator(h, 0.8, psi)
        assert np.allclose(out.amplitudes, propagator(h, 0.8).matrix @ psi.amplitudes, atol=1e-12)


class TestKrylov:
    def test_agrees_with_dense_at_n32(self, rng):
        h = lmg_hamiltonian(32, rng.uniform(-1.7, 1.7))
        psi = random_state(rng, 33)
        dense = apply_propagator(h, 1.0, psi).amplitudes
        kry = apply_propagator_krylov(h, 1.0, psi, tol=1e-12).amplitudes
        assert np.linalg.norm(dense - kry) < 1e-10

    @given(st.integers(2, 64), st.floats(-1.7, 1.7), st.floats(0.01, 3.0))
    def test_fidelity_agreement_small_dims(self, N, g, dt):
        h = lmg_hamiltonian(N, g)
        psi = random_state(np.random.default_rng(N), N + 1)
        a = apply_propagator(h, dt, psi)
        b = apply_propagator_krylov(h, dt, psi)
        assert abs(fidelity(a, psi) - fidelity(b, psi)) < 1e-9
        assert abs(np.linalg.norm(b.amplitudes) - 1) < 1e-12

    def test_zero_time(self, rng):
        psi = random_state(rng, 9)
        assert apply_propagator_krylov(lmg_hamiltonian(8, 0.5), 0.0, psi) is psi

    def test_eigenvector_only_gains_phase(self):
        h = lmg_hamiltonian(40, 0.7)
        gs = ground_state(h)
        out = apply_propagator_krylov(h, 2.0, gs.state)
        phase = np.exp(-1j * gs.energy * 2.0)
        assert np.allclose(out.amplitudes, phase * gs.state.amplitudes, atol=1e-10)
        assert fidelity(out, gs.state) == pytest.approx(1.0, abs=1e-12)

    def test_large_dimension_dispatch(self, rng):
        N = PROPAGATOR_DENSE_MAX_DIM + 100
        h = lmg_hamiltonian(N, 1.0)
        psi = random_state(rng, N + 1)
        out = apply_propagator(h, 0.5, psi)
        ref = propagator(HermitianOperator(h.matrix), 0.5).matrix @ psi.amplitudes
        assert np.linalg.norm(out.amplitudes - ref) < 1e-9

    def test_failure_names_residual(self, rng):
        h = lmg_hamiltonian(200, 1.0)
        psi = random_state(rng, 201)
        with pytest.raises(KrylovConvergenceError, match="residual"):
            apply_propagator_krylov(h, 50.0, psi, tol=1e-14, max_dim=4, max_substeps=2)

    def test_rejects_bad_tolerance(self, rng):
        with pytest.raises(ValueError):
            apply_propagator_krylov(lmg_hamiltonian(4, 0.1), 1.0, random_state(rng, 5), tol=0)


class TestFidelity:
    @given(st.floats(0, 2 * np.pi))
    def test_phase_invariance(self, theta):
        psi = random_state(np.random.default_rng(1), 6)
        assert fidelity(psi, StateVector(np.exp(1j * theta) * psi.amplitudes)) == pytest.approx(1.0, abs=1e-12)

    def test_symmetric(self, rng):
        a, b = random_state(rng, 5), random_state(rng, 5)
        assert fidelity(a, b) == pytest.approx(fidelity(b, a), abs=1e-15)
        assert 0 <= fidelity(a, b) <= 1

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fidelity(StateVector([1, 0]), StateVector([1, 0, 0]))
