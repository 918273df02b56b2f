import numpy as np
import pytest
from hypothesis import given, strategies as st

from bangopt.evolution import cost_fidelity
from bangopt.experiments import (
    ScanRecord,
    bracket_threshold,
    constant_scan,
    energy_bound_study,
    extract_tau_star,
    fit_power_law,
    min_time_from_map,
    optimize_point,
    saturated_scan,
    scan_tau,
    two_segment_fidelities,
)
from bangopt.models import lmg_problem, lz_problem
from bangopt.protocols import Constant, SaturatedDoubleBang


def record(tau, f):
    return ScanRecord("lz", 1, tau, 10.0, "double-bang", f, (), 0)


class TestTauStar:
    def test_threshold_interpolates(self):
        taus = np.linspace(0.5, 1.5, 11)
        recs = [record(t, min(t, 1.0)) for t in taus]
        star = extract_tau_star(recs, "threshold", level=0.998)
        assert star.tau == pytest.approx(0.998, abs=1e-12)
        assert star.criterion == "threshold"

    def test_kink_at_saturation(self):
        taus = np.linspace(0.5, 1.5, 21)
        infid = np.where(taus < 1.0, np.exp(-8 * taus), np.exp(-8.0) * 0.999)
        star = extract_tau_star(list(zip(taus, 1 - infid)), "kink")
        assert star.tau == pytest.approx(1.0, abs=1e-12)
        assert star.spacing == pytest.approx(0.05)

    def test_first_point_already_above(self):
        star = extract_tau_star([(0.3, 0.9999), (0.4, 1.0)], "threshold", level=0.998)
        assert star.tau == 0.3

    def test_never_reached(self):
        with pytest.raises(ValueError, match="0.5"):
            extract_tau_star([(0.3, 0.2), (0.4, 0.5)], "threshold")

    def test_flat_curve_has_no_kink(self):
        with pytest.raises(ValueError, match="kink"):
            extract_tau_star([(t, 1.0) for t in np.linspace(0.1, 1, 10)], "kink")

    def test_unknown_criterion(self):
        with pytest.raises(ValueError):
            extract_tau_star([(0.3, 0.2)], "median")

    @given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=30), st.floats(0.05, 0.95), st.floats(0.0, 0.04))
    def test_threshold_monotone_in_level(self, fs, level, bump):
        fs = np.maximum.accumulate(np.array(fs))
        fs[-1] = 1.0
        pairs = list(zip(np.arange(1, len(fs) + 1) * 0.1, fs))
        low = extract_tau_star(pairs, "threshold", level=level).tau
        high = extract_tau_star(pairs, "threshold", level=level + bump).tau
        assert high >= low - 1e-12


class TestPowerLaw:
    @given(st.floats(-2, 2), st.floats(0.1, 10))
    def test_exact_recovery(self, b, a):
        x = np.array([16, 32, 64, 128, 256, 512, 1024], dtype=float)
        fit = fit_power_law(x, a * x**b)
        assert fit.slope == pytest.approx(b, abs=1e-10)
        assert fit.alpha == pytest.approx(-b, abs=1e-10)
        assert fit.amplitude == pytest.approx(a, rel=1e-9)
        # sqrt of rounding-level residuals
        assert fit.standard_error < 1e-6

    def test_residuals_zero_mean(self, rng):
        x = np.geomspace(10, 1000, 9)
        y = 2 * x**-0.3 * np.exp(rng.normal(0, 0.05, x.size))
        fit = fit_power_law(x, y)
        assert abs(np.mean(fit.residuals())) < 1e-12
        assert fit.standard_error > 0

    def test_two_points(self):
        fit = fit_power_law([1, 2], [1, 0.5])
        assert fit.slope == pytest.approx(-1)
        assert fit.standard_error == 0.0

    @pytest.mark.parametrize("x, y", [([1], [1]), ([1, -2], [1, 1]), ([1, 2], [1, 0])])
    def test_rejects_bad_input(self, x, y):
        with pytest.raises(ValueError):
            fit_power_law(x, y)


class TestMaps:
    def test_degenerate_fractions_match_constants(self):
        taus = np.linspace(0, 2, 9)
        sat = saturated_scan(10, 1.7, taus, [0.0, 0.3, 1.0])
        const = constant_scan(10, [-1.7, 1.7], taus)
        assert np.allclose(sat.column(1.0), const.column(1.7), atol=1e-12)
        assert np.allclose(sat.column(0.0), const.column(-1.7), atol=1e-12)

    def test_saturated_matches_protocol_evolution(self):
        problem = lmg_problem(12, g_max=2.0)
        sat = saturated_scan(12, 2.0, [0.9], [0.4])
        p = SaturatedDoubleBang(0.9, 2.0, t1=0.36)
        assert sat.values[0, 0] == pytest.approx(cost_fidelity(problem, p), abs=1e-12)

    def test_initial_coupling_is_stationary(self):
        problem = lmg_problem(20)
        expected = problem.overlap_fidelity()
        fmap = constant_scan(20, [0.0, 0.5], np.linspace(0, 5, 11))
        assert np.allclose(fmap.column(0.0), expected, atol=1e-12)

    def test_constant_matches_protocol_evolution(self):
        problem = lmg_problem(16)
        fmap = constant_scan(16, [0.6], [1.3])
        assert fmap.values[0, 0] == pytest.approx(cost_fidelity(problem, Constant(1.3, 1.0, 0.6)), abs=1e-12)

    def test_values_are_probabilities(self):
        fmap = saturated_scan(30, 4.0, np.linspace(0, 3, 31), np.linspace(0, 1, 11))
        assert np.all((fmap.values >= 0) & (fmap.values <= 1))

    def test_two_segment_shapes(self):
        out = two_segment_fidelities(lz_problem(), 1.0, -1.0, np.ones((3, 4)), np.zeros((3, 4)))
        assert out.shape == (3, 4)

    def test_min_time(self):
        fmap = saturated_scan(30, 4.0, np.linspace(0.1, 3, 30), np.linspace(0, 1, 21))
        t = min_time_from_map(fmap, 0.9)
        assert np.any(fmap.values[fmap.taus == t] > 0.9)
        assert np.all(fmap.values[fmap.taus < t] <= 0.9)
        with pytest.raises(ValueError):
            min_time_from_map(fmap, 1.1)

    @pytest.mark.parametrize("fractions", [[], [-0.1], [1.2]])
    def test_bad_fractions(self, fractions):
        with pytest.raises(ValueError):
            saturated_scan(10, 2.0, [1.0], fractions)


class TestScans:
    def test_record_reproducible(self):
        problem = lmg_problem(12, g_max=1.7)
        a = optimize_point(problem, "double-bang", 0.8, restarts=2, seed=5)
        b = optimize_point(problem, "double-bang", 0.8, restarts=2, seed=5)
        assert a == b
        assert a.model == "lmg" and a.N == 12 and a.seed == 5

    def test_crab_record_keeps_frequencies(self):
        rec = optimize_point(lz_problem(), "crab(2)", 0.9, restarts=1, seed=1, maxfev=200)
        assert len(rec.frequencies) == 2
        assert rec.params() == rec.best_x + rec.frequencies

    def test_lz_scan_monotone(self):
        taus = np.round(np.arange(0.5, 0.9, 0.05), 2)
        recs = scan_tau(lz_problem(), "double-bang", taus, restarts=8, seed=0)
        fs = np.array([r.fidelity for r in recs])
        assert [r.tau for r in recs] == list(taus)
        assert np.all(np.diff(fs) > -1e-3)

    def test_scan_rejects_unsorted(self):
        with pytest.raises(ValueError):
            scan_tau(lz_problem(), "double-bang", [0.8, 0.7])

    def test_energy_bound_rejects_small_bound(self):
        with pytest.raises(ValueError):
            energy_bound_study(10, [0.5], "double-bang", [0.5], restarts=1)

    def test_energy_bound_records(self):
        recs = energy_bound_study(10, [1.5, 3.0], "saturated-db", [0.5, 1.0], restarts=1)
        assert [(r.g_max, r.tau) for r in recs] == [(1.5, 0.5), (1.5, 1.0), (3.0, 0.5), (3.0, 1.0)]


class TestBracket:
    def test_bisects_to_width(self):
        calls = []

        def run(tau):
            calls.append(tau)
            return record(tau, 1.0 if tau >= 0.777 else 0.5)

        recs = bracket_threshold(run, level=0.998, tau_start=0.5, growth=1.25, rel_width=1e-3)
        passing = [r.tau for r in recs if r.fidelity >= 0.998]
        failing = [r.tau for r in recs if r.fidelity < 0.998]
        assert min(passing) - max(failing) <= 1e-3 * min(passing)
        assert max(failing) < 0.777 <= min(passing)
        assert len(calls) == len(set(calls))

    def test_unreachable(self):
        with pytest.raises(ValueError, match="not reached"):
            bracket_threshold(lambda t: record(t, 0.1), max_coarse=5)
