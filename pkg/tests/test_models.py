import numpy as np
import pytest
from hypothesis import given, strategies as st

from bangopt.models import (
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    ControlProblem,
    collective_spin,
    critical_gap,
    lmg_hamiltonian,
    lmg_operators,
    lmg_problem,
    lz_problem,
    parity_operator,
    sx_squared,
)
from bangopt.quantum import HermitianOperator, StateVector, fidelity, ground_state, spectral_gap


def spins(N):
    return [collective_spin(N, a).matrix for a in "xyz"]


class TestCollectiveSpin:
    def test_single_spin_is_half_pauli(self):
        sx, sy, sz = spins(1)
        assert np.allclose(sx, SIGMA_X / 2)
        assert np.allclose(sy, SIGMA_Y / 2)
        assert np.allclose(sz, SIGMA_Z / 2)

    def test_spin_one_sx(self):
        sx = collective_spin(2, "x").matrix
        r = 1 / np.sqrt(2)
        assert np.allclose(sx, [[0, r, 0], [r, 0, r], [0, r, 0]])

    @pytest.mark.parametrize("N", range(1, 17))
    def test_commutator(self, N):
        sx, sy, sz = spins(N)
        assert np.max(np.abs(sx @ sy - sy @ sx - 1j * sz)) < 1e-12

    @pytest.mark.parametrize("N", [1, 2, 7, 32, 64])
    def test_total_spin_constant(self, N):
        sx, sy, sz = spins(N)
        S = N / 2
        s2 = sx @ sx + sy @ sy + sz @ sz
        assert np.max(np.abs(s2 - S * (S + 1) * np.eye(N + 1))) < 1e-10

    @pytest.mark.parametrize("N", [2, 5, 30])
    def test_sx_squared_matches_product(self, N):
        sx = collective_spin(N, "x").matrix
        assert np.allclose(sx_squared(N).matrix, sx @ sx, atol=1e-12)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            collective_spin(0, "x")
        with pytest.raises(ValueError):
            collective_spin(3, "w")


class TestLandauZener:
    def test_default_target(self):
        p = lz_problem()
        minus = StateVector([1, -1])
        assert fidelity(p.target_state, minus) == pytest.approx(1.0, abs=1e-12)

    def test_initial_overlap_with_polarized_state(self):
        # ground state of -sigma_z is the first basis vector
        f = fidelity(lz_problem().initial_state, StateVector.basis(2, 0))
        assert f == pytest.approx(0.99, abs=0.005)

    def test_equal_couplings(self):
        p = lz_problem(0.0, 0.0)
        assert p.overlap_fidelity() == pytest.approx(1.0, abs=1e-12)

    def test_bound_violation(self):
        with pytest.raises(ValueError, match="g_max"):
            lz_problem(-5, 0, g_max=4)
        with pytest.raises(ValueError):
            lz_problem(g_max=0)

    def test_problem_invariants(self):
        p = lz_problem()
        for g, state in ((p.g0, p.initial_state), (p.g1, p.target_state)):
            ref = ground_state(HermitianOperator(SIGMA_X + g * SIGMA_Z)).state
            assert fidelity(ref, state) > 1 - 1e-12


class TestLMG:
    def test_hand_assembled_n4(self):
        # S = 2, basis m = 2, 1, 0, -1, -2; H = Sz - Sx^2 / 4
        a = np.sqrt(6) / 2
        sx2 = np.array([
            [1.0, 0, a, 0, 0],
            [0, 2.5, 0, 1.5, 0],
            [a, 0, 3.0, 0, a],
            [0, 1.5, 0, 2.5, 0],
            [0, 0, a, 0, 1.0],
        ])
        h = np.diag([2.0, 1, 0, -1, -2]) - sx2 / 4
        expected = np.sort(np.linalg.eigvals(h).real)
        assert np.allclose(lmg_hamiltonian(4, 1.0).eigenvalues, expected, atol=1e-12)

    def test_n2_gap_brute_force(self):
        h = np.array([[0.75, 0, -0.25], [0, -0.5, 0], [-0.25, 0, -1.25]])
        w = np.sort(np.linalg.eigvals(h).real)
        assert critical_gap(2) == pytest.approx(w[1] - w[0], abs=1e-12)
        assert critical_gap(2) == pytest.approx(np.sqrt(1.0625) - 0.25, abs=1e-12)

    @pytest.mark.parametrize("N", [8, 50])
    def test_uncoupled_ground_state(self, N):
        gs = ground_state(lmg_hamiltonian(N, 0.0))
        assert gs.energy == pytest.approx(-N / 2)
        # |S, m = -S> is the last Dicke state
        assert fidelity(gs.state, StateVector.basis(N + 1, N)) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("N", [2, 9, 40])
    def test_uncoupled_gap(self, N):
        assert spectral_gap(lmg_hamiltonian(N, 0.0)) == pytest.approx(1.0, abs=1e-12)

    def test_gap_minimum_near_critical_point(self):
        gs = np.linspace(0, 2, 81)
        gaps = [spectral_gap(lmg_hamiltonian(256, g, "even")) for g in gs]
        assert abs(gs[int(np.argmin(gaps))] - 1.0) < 0.1

    def test_critical_gap_decreases(self):
        gaps = [critical_gap(N) for N in (16, 32, 64, 128)]
        assert np.all(np.diff(gaps) < 0)

    def test_gap_exponent(self):
        Ns = np.array([64, 128, 256, 512, 1024, 2048])
        slope = np.polyfit(np.log(Ns), np.log([critical_gap(n) for n in Ns]), 1)[0]
        assert abs(slope + 1 / 3) < 0.05

    @pytest.mark.parametrize("N", [2, 3, 17, 64])
    def test_parity_symmetry(self, N):
        h = lmg_hamiltonian(N, 1.3).matrix
        p = np.diag(parity_operator(N))
        assert np.max(np.abs(h @ p - p @ h)) < 1e-12

    @pytest.mark.parametrize("N", [6, 7, 40])
    def test_even_sector_preserves_ground_states(self, N):
        full = lmg_problem(N)
        even = lmg_problem(N, sector="even")
        assert even.dim == N // 2 + 1
        assert full.overlap_fidelity() == pytest.approx(even.overlap_fidelity(), abs=1e-12)
        w_full = lmg_hamiltonian(N, 0.8).eigenvalues
        assert ground_state(lmg_hamiltonian(N, 0.8, "even")).energy == pytest.approx(w_full[0], abs=1e-12)

    def test_sectors_partition_spectrum(self):
        N = 11
        w = np.concatenate([lmg_hamiltonian(N, 1.0, s).eigenvalues for s in ("even", "odd")])
        assert np.allclose(np.sort(w), lmg_hamiltonian(N, 1.0).eigenvalues, atol=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            lmg_problem(1)
        with pytest.raises(ValueError):
            lmg_operators(4, "both")
        with pytest.raises(ValueError, match="g_max"):
            lmg_problem(10, g_max=0.5)

    def test_problem_invariants(self):
        p = lmg_problem(12, g0=0.2, g1=1.0, g_max=1.7)
        for g, state in ((p.g0, p.initial_state), (p.g1, p.target_state)):
            ref = ground_state(lmg_hamiltonian(12, g)).state
            assert fidelity(ref, state) > 1 - 1e-12


class TestControlProblem:
    def test_hamiltonian_cache_reuses_operator(self):
        p = lmg_problem(10)
        assert p.hamiltonian(0.5) is p.hamiltonian(0.5)

    def test_hamiltonian_cache_is_bounded(self):
        p = lz_problem()
        for g in np.linspace(-1, 1, 200):
            p.hamiltonian(g)
        assert len(p._cache) <= 64

    @given(st.floats(-1.7, 1.7))
    def test_pair_bands_reproduce_hamiltonian(self, g):
        p = lmg_problem(9)
        offsets, b0, b1, _, _ = p.pair_bands()
        op = HermitianOperator.from_bands(p.dim, {int(k): (b0[i] + g * b1[i])[: p.dim - k]
                                                  for i, k in enumerate(offsets)})
        assert np.allclose(op.matrix, p.hamiltonian(g).matrix, atol=1e-12)

    def test_build_validates(self):
        h = HermitianOperator(SIGMA_X)
        with pytest.raises(ValueError):
            ControlProblem.build(h, HermitianOperator(SIGMA_Z), 3.0, 0.0, 2.0)
