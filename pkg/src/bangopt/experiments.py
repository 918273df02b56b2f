"""Parameter scans, minimal-time extraction and power-law fits."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import NamedTuple, Sequence

import numpy as np
import scipy.stats

from bangopt.evolution import PRECISION_FLOOR, report_fidelity
from bangopt.models import critical_gap, lmg_problem
from bangopt.optimizers import optimize_protocol
from bangopt.protocols import Crab, ProtocolFamily

log = logging.getLogger(__name__)

THRESHOLD_LEVEL = 0.998
KINK_FLOOR = 0.9
DEFAULT_N_LIST = (16, 32, 64, 128, 256, 512, 1024, 2048)


@dataclass(frozen=True)
class ScanRecord:
    """One optimized grid point.

    ``fidelity`` is the reported value: clamped to ``1 - 1e-12`` when it
    sits at the precision floor, in which case ``precision_limited`` is set.
    For CRAB families ``frequencies`` holds the drawn harmonics, which are
    needed together with ``best_x`` to rebuild the protocol.
    """

    model: str
    N: int
    tau: float
    g_max: float
    family: str
    fidelity: float
    best_x: tuple
    seed: int
    precision_limited: bool = False
    evaluations: int = 0
    frequencies: tuple = ()

    def params(self) -> tuple:
        return tuple(self.best_x) + tuple(self.frequencies)


def record_from_result(problem, result, tau: float) -> ScanRecord:
    f, flagged = report_fidelity(result.best_fidelity)
    freqs = result.protocol.frequencies if isinstance(result.protocol, Crab) else ()
    return ScanRecord(
        model=problem.label.split("[")[0],
        N=problem.N,
        tau=float(tau),
        g_max=problem.g_max,
        family=result.family,
        fidelity=f,
        best_x=tuple(float(v) for v in result.best_x),
        seed=result.seed,
        precision_limited=flagged,
        evaluations=result.evaluations,
        frequencies=tuple(float(w) for w in freqs),
    )


def optimize_point(problem, family, tau: float, restarts=None, seed: int = 0, **options) -> ScanRecord:
    """Optimize one ``(problem, family, tau)`` grid point into a record."""
    result = optimize_protocol(problem, family, tau, restarts, seed, **options)
    return record_from_result(problem, result, tau)


def parallel_map(func, items, workers: int = 1) -> list:
    """Ordered map, in a process pool when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(func, items))


def _check_taus(taus) -> np.ndarray:
    taus = np.asarray(taus, dtype=float).reshape(-1)
    if taus.size == 0:
        raise ValueError("need at least one duration")
    if np.any(taus <= 0):
        raise ValueError("durations must be positive")
    if np.any(np.diff(taus) <= 0):
        raise ValueError("durations must be strictly ascending")
    return taus


def scan_tau(
    problem, family, taus, restarts=None, seed: int = 0, *, workers: int = 1, **options
) -> list[ScanRecord]:
    """Independent optimizations at each duration, all with the same seed."""
    taus = _check_taus(taus)
    task = partial(_scan_task, problem, str(ProtocolFamily.parse(family)), restarts, seed, options)
    return parallel_map(task, taus, workers)


def _scan_task(problem, family, restarts, seed, options, tau):
    return optimize_point(problem, family, float(tau), restarts, seed, **options)


# minimal time extraction


class TauStar(NamedTuple):
    tau: float
    criterion: str
    level: float
    # uniform grid spacing the kink was located on; 0 for the threshold criterion
    spacing: float = 0.0


def _curve(records) -> tuple[np.ndarray, np.ndarray]:
    if not len(records):
        raise ValueError("no records")
    if isinstance(records[0], ScanRecord):
        taus = np.array([r.tau for r in records], dtype=float)
        fs = np.array([r.fidelity for r in records], dtype=float)
    else:
        taus, fs = (np.asarray(c, dtype=float) for c in zip(*records))
    if np.any(np.diff(taus) <= 0):
        raise ValueError("records must be in strictly ascending duration")
    return taus, fs


def extract_tau_star(
    records, criterion: str = "threshold", level: float = THRESHOLD_LEVEL, floor: float = KINK_FLOOR
) -> TauStar:
    """Minimal duration from a fidelity-versus-duration curve.

    ``threshold``: the first crossing of ``F = level``, linearly interpolated
    between the bracketing records.  ``kink``: the duration where the
    infidelity stops falling most abruptly, i.e. the largest central second
    difference of ``log(1 - F)`` (infidelity clamped at the precision
    floor), searched from the first point where ``F`` exceeds ``floor``;
    needs a uniform grid.

    ``records`` are :class:`ScanRecord` objects or ``(tau, F)`` pairs.
    """
    taus, fs = _curve(records)
    if criterion == "threshold":
        hits = np.flatnonzero(fs >= level)
        if hits.size == 0:
            raise ValueError(f"fidelity {level} never reached; maximum seen {fs.max():.12g}")
        i = hits[0]
        if i == 0:
            return TauStar(float(taus[0]), criterion, level)
        t0, t1, f0, f1 = taus[i - 1], taus[i], fs[i - 1], fs[i]
        return TauStar(float(t0 + (level - f0) / (f1 - f0) * (t1 - t0)), criterion, level)
    if criterion == "kink":
        if taus.size < 3:
            raise ValueError("kink detection needs at least three records")
        steps = np.diff(taus)
        h = steps.mean()
        if np.max(np.abs(steps - h)) > 1e-6 * h:
            raise ValueError("kink detection needs a uniform duration grid")
        above = np.flatnonzero(fs > floor)
        if above.size == 0:
            raise ValueError(f"fidelity never exceeds {floor}; maximum seen {fs.max():.12g}")
        q = np.log(np.maximum(1.0 - fs, PRECISION_FLOOR))
        # curvature[j] belongs to taus[j + 1]
        curvature = q[2:] - 2 * q[1:-1] + q[:-2]
        start = max(above[0] - 1, 0)
        window = curvature[start:]
        if window.size == 0 or window.max() <= 0:
            raise ValueError("no kink: the infidelity never levels off")
        j = start + int(np.argmax(window))
        return TauStar(float(taus[j + 1]), criterion, floor, float(h))
    raise ValueError(f"unknown criterion {criterion!r}; valid: threshold, kink")


# power-law fits


@dataclass(frozen=True)
class ScalingFit:
    """Least-squares fit of ``y = amplitude * x**(-alpha)`` in log-log space.

    ``standard_error`` is the least-squares standard error of the slope.
    """

    alpha: float
    amplitude: float
    standard_error: float
    points: tuple

    @property
    def slope(self) -> float:
        return -self.alpha

    def residuals(self) -> np.ndarray:
        x, y = np.array(self.points, dtype=float).T
        return np.log(y) - (np.log(self.amplitude) - self.alpha * np.log(x))

    def to_dict(self) -> dict:
        return dict(
            alpha=self.alpha, slope=self.slope, amplitude=self.amplitude,
            standard_error=self.standard_error, standard_error_kind="least-squares slope",
            points=[list(p) for p in self.points],
        )


def fit_power_law(x, y) -> ScalingFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need at least two (x, y) points of equal length")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs positive data")
    fit = scipy.stats.linregress(np.log(x), np.log(y))
    return ScalingFit(
        alpha=float(-fit.slope),
        amplitude=float(np.exp(fit.intercept)),
        standard_error=float(fit.stderr) if x.size > 2 else 0.0,
        points=tuple((float(a), float(b)) for a, b in zip(x, y)),
    )


# scaling with system size


@dataclass
class SizeResult:
    N: int
    gap: float
    threshold: TauStar
    kink: TauStar
    records: list
    kink_records: list


@dataclass
class ScalingStudy:
    threshold: ScalingFit
    kink: ScalingFit
    sizes: list
    settings: dict = field(default_factory=dict)

    def agree(self) -> bool:
        """Exponents of the two criteria within their combined standard errors."""
        combined = np.hypot(self.threshold.standard_error, self.kink.standard_error)
        return abs(self.threshold.alpha - self.kink.alpha) <= combined


def bracket_threshold(
    run,
    level: float = THRESHOLD_LEVEL,
    tau_start: float = 0.5,
    growth: float = 1.25,
    rel_width: float = 1e-3,
    max_coarse: int = 40,
) -> list[ScanRecord]:
    """Geometric coarse scan until ``F >= level``, then bisection of the bracket.

    ``run(tau)`` returns a :class:`ScanRecord`.  Every evaluated record is
    returned, sorted by duration.
    """
    done = {}

    def at(tau):
        if tau not in done:
            done[tau] = run(tau)
        return done[tau]

    lo, hi = 0.0, float(tau_start)
    for _ in range(max_coarse):
        if at(hi).fidelity >= level:
            break
        lo, hi = hi, hi * growth
    else:
        best = max(r.fidelity for r in done.values())
        raise ValueError(f"fidelity {level} not reached up to tau={hi / growth:.4g}; maximum seen {best:.12g}")
    while lo > 0 and hi - lo > rel_width * hi:
        mid = 0.5 * (lo + hi)
        if at(mid).fidelity >= level:
            hi = mid
        else:
            lo = mid
    return [done[t] for t in sorted(done)]


def scaling_study(
    N_list=DEFAULT_N_LIST,
    g_max: float = 1.7,
    family="double-bang",
    restarts=None,
    seed: int = 0,
    *,
    level: float = THRESHOLD_LEVEL,
    tau_start: float = 0.5,
    growth: float = 1.25,
    rel_width: float = 1e-3,
    kink_span: tuple = (0.75, 1.35),
    kink_points: int = 31,
    sector: str | None = "even",
    workers: int = 1,
    **options,
) -> ScalingStudy:
    """Minimal LMG preparation time against system size for both criteria.

    Per ``N`` the threshold time is bracketed (coarse geometric scan plus
    bisection), then a uniform grid spanning ``kink_span`` times that value
    locates the kink.  ``tau* * gap`` is fitted against ``N`` for both.
    The dynamics run in the parity sector of the ground state by default,
    which leaves fidelities unchanged; the gap is the overall one.
    """
    N_list = [int(n) for n in N_list]
    if not N_list or any(n < 2 for n in N_list) or np.any(np.diff(N_list) <= 0):
        raise ValueError("N_list must be ascending with every N >= 2")
    family = str(ProtocolFamily.parse(family))
    settings = dict(
        N_list=N_list, g_max=g_max, family=family, restarts=restarts, seed=seed, level=level,
        tau_start=tau_start, growth=growth, rel_width=rel_width, kink_span=list(kink_span),
        kink_points=kink_points, sector=sector, options=options,
    )
    task = partial(
        _size_task, g_max, family, restarts, seed, level, tau_start, growth, rel_width,
        tuple(kink_span), kink_points, sector, options,
    )
    sizes = parallel_map(task, N_list, workers)
    Ns = [s.N for s in sizes]
    return ScalingStudy(
        threshold=fit_power_law(Ns, [s.threshold.tau * s.gap for s in sizes]),
        kink=fit_power_law(Ns, [s.kink.tau * s.gap for s in sizes]),
        sizes=sizes,
        settings=settings,
    )


def _size_task(g_max, family, restarts, seed, level, tau_start, growth, rel_width,
               kink_span, kink_points, sector, options, N) -> SizeResult:
    problem = lmg_problem(N, g_max=g_max, sector=sector)

    def run(tau):
        return optimize_point(problem, family, tau, restarts, seed, **options)

    records = bracket_threshold(run, level, tau_start, growth, rel_width)
    tau_thr = extract_tau_star(records, "threshold", level)
    grid = np.linspace(kink_span[0] * tau_thr.tau, kink_span[1] * tau_thr.tau, kink_points)
    kink_records = [run(float(t)) for t in grid]
    tau_kink = extract_tau_star(kink_records, "kink")
    gap = critical_gap(N)
    log.info("N=%d gap=%.6g tau*(threshold)=%.5g tau*(kink)=%.5g", N, gap, tau_thr.tau, tau_kink.tau)
    return SizeResult(N, gap, tau_thr, tau_kink, records, kink_records)


def energy_bound_study(
    N: int, g_max_list, family, taus, restarts=None, seed: int = 0, *, workers: int = 1, **options
) -> list[ScanRecord]:
    """Full duration scan of an LMG problem for every bound in ``g_max_list``."""
    if not len(g_max_list):
        raise ValueError("need at least one bound")
    sector = options.pop("sector", None)
    out = []
    for g_max in g_max_list:
        problem = lmg_problem(N, g_max=g_max, sector=sector)
        out.extend(scan_tau(problem, family, taus, restarts, seed, workers=workers, **options))
    return out


# optimization-free fidelity maps


@dataclass(frozen=True)
class FidelityMap:
    """Fidelities on a ``(tau, column)`` grid, ``values[i, j]`` at ``taus[i]``, ``columns[j]``."""

    taus: np.ndarray
    columns: np.ndarray
    values: np.ndarray
    column_name: str
    g_max: float = 0.0

    def column(self, value: float) -> np.ndarray:
        j = int(np.argmin(np.abs(self.columns - value)))
        return self.values[:, j]

    def best_per_tau(self) -> np.ndarray:
        return self.values.max(axis=1)


def _spectral(problem, g):
    vals, vecs = problem.hamiltonian(g).eigh()
    return vals, vecs


def _grid(values, name) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} grid is empty")
    return arr


def two_segment_fidelities(problem, gA: float, gB: float, tA, tB) -> np.ndarray:
    """Fidelity after ``tA`` at ``gA`` followed by ``tB`` at ``gB``, for arrays of durations."""
    tA, tB = np.broadcast_arrays(np.asarray(tA, dtype=float), np.asarray(tB, dtype=float))
    la, va = _spectral(problem, gA)
    lb, vb = _spectral(problem, gB)
    c = va.conj().T @ problem.initial_state.amplitudes
    overlap = vb.conj().T @ va
    d = vb.conj().T @ problem.target_state.amplitudes
    flat_a, flat_b = tA.reshape(-1), tB.reshape(-1)
    out = np.empty(flat_a.size)
    chunk = max(1, 2**22 // max(problem.dim, 1) ** 2)
    for s in range(0, flat_a.size, chunk):
        pa = np.exp(-1j * np.outer(la, flat_a[s:s + chunk])) * c[:, None]
        mid = overlap @ pa
        amp = np.sum(d.conj()[:, None] * np.exp(-1j * np.outer(lb, flat_b[s:s + chunk])) * mid, axis=0)
        out[s:s + chunk] = np.abs(amp) ** 2
    return np.minimum(out, 1.0).reshape(tA.shape)


def saturated_scan(N: int, g_max: float, taus, fractions, sector: str | None = None) -> FidelityMap:
    """Fidelity of ``+g_max`` until ``fraction * tau``, then ``-g_max``, on a grid."""
    taus = _grid(taus, "tau")
    fractions = _grid(fractions, "fraction")
    if np.any(taus < 0):
        raise ValueError("durations must be non-negative")
    if np.any((fractions < 0) | (fractions > 1)):
        raise ValueError("switch fractions must lie in [0, 1]")
    problem = lmg_problem(N, g_max=g_max, sector=sector)
    t1 = np.outer(taus, fractions)
    values = two_segment_fidelities(problem, g_max, -g_max, t1, taus[:, None] - t1)
    return FidelityMap(taus, fractions, values, "t1_fraction", float(g_max))


def constant_scan(N: int, g_grid, taus, sector: str | None = None) -> FidelityMap:
    """Fidelity of a constant protocol ``g`` held for ``tau``, on a grid."""
    taus = _grid(taus, "tau")
    g_grid = _grid(g_grid, "g")
    if np.any(taus < 0):
        raise ValueError("durations must be non-negative")
    bound = max(1.0, float(np.max(np.abs(g_grid))))
    problem = lmg_problem(N, g_max=bound, sector=sector)
    values = np.empty((taus.size, g_grid.size))
    for j, g in enumerate(g_grid):
        values[:, j] = two_segment_fidelities(problem, g, g, taus, np.zeros_like(taus))
    return FidelityMap(taus, g_grid, values, "g", bound)


def min_time_from_map(fmap: FidelityMap, level: float = 0.99) -> float:
    """Smallest grid duration at which some column exceeds ``level``."""
    hits = np.flatnonzero(fmap.best_per_tau() > level)
    if hits.size == 0:
        raise ValueError(f"no grid point exceeds {level}; maximum seen {fmap.values.max():.12g}")
    return float(fmap.taus[hits[0]])


def bound_scaling_fit(
    N: int, g_max_list: Sequence[float], taus, fractions, level: float = 0.99, sector: str | None = None
) -> ScalingFit:
    """Fit ``tau*(g_max) = a g_max**b`` from saturated double-bang maps.

    The returned fit has ``slope == b`` and ``amplitude == a``.
    """
    times = [min_time_from_map(saturated_scan(N, g, taus, fractions, sector), level) for g in g_max_list]
    return fit_power_law(g_max_list, times)

