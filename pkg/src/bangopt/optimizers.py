"""Derivative-free box-constrained optimizers and the protocol optimization driver."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from bangopt.evolution import DEFAULT_TOL, cost_fidelity
from bangopt.protocols import Protocol, ProtocolFamily

log = logging.getLogger(__name__)

BANG_DEFAULTS = dict(method="powell", restarts=20, maxfev=5000)
CRAB_DEFAULTS = dict(method="nelder-mead", restarts=10, maxfev=20000)
XATOL = 1e-10
FATOL = 1e-12
# Relative slice-convergence tolerance for smooth protocols inside the objective.
SAMPLED_RTOL = 1e-3
CRAB_JITTER = 0.05
INITIAL_STEP = 0.1


class _BudgetExhausted(Exception):
    pass


@dataclass
class MinimizeResult:
    """Outcome of one bounded local search.

    ``value`` is in the caller's sense: the minimum, or the maximum when
    ``maximize=True``.
    """

    x: np.ndarray
    value: float
    nfev: int
    converged: bool
    budget_exhausted: bool
    history: list = field(default_factory=list)


class _Tracked:
    """Objective wrapper: counts calls, enforces the budget, remembers the best point."""

    def __init__(self, f, lower, upper, maxfev, maximize):
        self.f = f
        self.lower = lower
        self.upper = upper
        self.maxfev = maxfev
        self.sign = -1.0 if maximize else 1.0
        self.nfev = 0
        self.best_x = None
        self.best = np.inf
        self.history = []

    def __call__(self, x):
        if self.nfev >= self.maxfev:
            raise _BudgetExhausted
        x = np.clip(np.asarray(x, dtype=float), self.lower, self.upper)
        val = self.sign * float(self.f(x))
        self.nfev += 1
        if val < self.best or self.best_x is None:
            self.best = val
            self.best_x = x.copy()
        self.history.append((self.nfev, self.sign * self.best))
        return val

    def result(self, converged, exhausted):
        return MinimizeResult(
            self.best_x, self.sign * self.best, self.nfev, converged, exhausted, self.history
        )


def _box(bounds, n):
    lower, upper = (np.asarray(b, dtype=float).reshape(-1) for b in bounds)
    if lower.shape != (n,) or upper.shape != (n,) or np.any(lower > upper):
        raise ValueError("bounds must be two length-n arrays with lower <= upper")
    return lower, upper


def nelder_mead_adaptive(
    f,
    x0,
    bounds,
    *,
    xatol: float = XATOL,
    fatol: float = FATOL,
    maxfev: int = 5000,
    initial_step: float = INITIAL_STEP,
    maximize: bool = False,
) -> MinimizeResult:
    """Nelder-Mead with dimension-adaptive coefficients and iterates clamped to a box.

    Stops when the simplex diameter drops below ``xatol``, when the spread of
    objective values drops below ``fatol``, or when ``maxfev`` evaluations
    have been spent (the best point so far is returned, flagged).
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n = x0.size
    lower, upper = _box(bounds, n)
    fun = _Tracked(f, lower, upper, maxfev, maximize)
    rho = 1.0
    chi = 1.0 + 2.0 / n
    psi = 0.75 - 1.0 / (2.0 * n)
    sigma = 1.0 - 1.0 / n

    def clamp(x):
        return np.clip(x, lower, upper)

    x0 = clamp(x0)
    sim = np.empty((n + 1, n))
    sim[0] = x0
    for i in range(n):
        step = initial_step * (upper[i] - lower[i]) or initial_step
        point = x0.copy()
        point[i] = x0[i] + step if x0[i] + step <= upper[i] else x0[i] - step
        sim[i + 1] = clamp(point)
    try:
        fsim = np.array([fun(p) for p in sim])
        while True:
            order = np.argsort(fsim, kind="stable")
            sim, fsim = sim[order], fsim[order]
            if (
                np.max(np.abs(sim[1:] - sim[0])) <= xatol
                or np.max(np.abs(fsim[1:] - fsim[0])) <= fatol
            ):
                return fun.result(True, False)
            xbar = sim[:-1].mean(axis=0)
            xr = clamp((1 + rho) * xbar - rho * sim[-1])
            fr = fun(xr)
            shrink = False
            if fr < fsim[0]:
                xe = clamp((1 + rho * chi) * xbar - rho * chi * sim[-1])
                fe = fun(xe)
                sim[-1], fsim[-1] = (xe, fe) if fe < fr else (xr, fr)
            elif fr < fsim[-2]:
                sim[-1], fsim[-1] = xr, fr
            elif fr < fsim[-1]:
                xc = clamp((1 + psi * rho) * xbar - psi * rho * sim[-1])
                fc = fun(xc)
                if fc <= fr:
                    sim[-1], fsim[-1] = xc, fc
                else:
                    shrink = True
            else:
                xcc = clamp((1 - psi) * xbar + psi * sim[-1])
                fcc = fun(xcc)
                if fcc < fsim[-1]:
                    sim[-1], fsim[-1] = xcc, fcc
                else:
                    shrink = True
            if shrink:
                for j in range(1, n + 1):
                    sim[j] = clamp(sim[0] + sigma * (sim[j] - sim[0]))
                    fsim[j] = fun(sim[j])
    except _BudgetExhausted:
        return fun.result(False, True)


GOLDEN = 1.618033988749895
LINE_STEP = 0.05


def _line_minimize(fun, x, fx, d, step, xtol):
    """Minimize ``fun(x + a d)`` over the feasible ``a`` near ``a = 0``.

    The minimum is bracketed by walking downhill from the current point
    before the bounded scalar search runs, so the search stays in the local
    basin instead of jumping across the box.  Never returns a worse point.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = np.where(d > 0, (fun.lower - x) / d, np.where(d < 0, (fun.upper - x) / d, -np.inf))
        t_hi = np.where(d > 0, (fun.upper - x) / d, np.where(d < 0, (fun.lower - x) / d, np.inf))
    a_min, a_max = min(0.0, float(np.max(t_lo))), max(0.0, float(np.min(t_hi)))
    if a_max - a_min <= xtol:
        return x, fx

    def phi(a):
        return fun(x + a * d)

    def walk(sign):
        edge = a_max if sign > 0 else a_min
        a = sign * min(step, abs(edge))
        if a == 0.0:
            return None
        fa = phi(a)
        if fa >= fx:
            return None
        prev = 0.0
        while a != edge:
            nxt = a + GOLDEN * (a - prev)
            nxt = min(nxt, edge) if sign > 0 else max(nxt, edge)
            fn = phi(nxt)
            if fn >= fa:
                return (prev, nxt, a, fa)
            prev, a, fa = a, nxt, fn
        return (prev, a, a, fa)

    bracket = walk(1.0) or walk(-1.0)
    if bracket is None:
        lo, hi, best_a, best_f = max(-step, a_min), min(step, a_max), 0.0, fx
    else:
        p, q, best_a, best_f = bracket
        lo, hi = min(p, q), max(p, q)
    if hi - lo > xtol:
        res = scipy.optimize.minimize_scalar(
            phi, bounds=(lo, hi), method="bounded", options=dict(xatol=xtol)
        )
        if res.fun < best_f:
            best_a, best_f = float(res.x), float(res.fun)
    if best_f < fx:
        return np.clip(x + best_a * d, fun.lower, fun.upper), best_f
    return x, fx


def powell(
    f,
    x0,
    bounds,
    *,
    xatol: float = XATOL,
    fatol: float = FATOL,
    maxfev: int = 5000,
    maximize: bool = False,
) -> MinimizeResult:
    """Powell's conjugate-direction method with bracketed, box-clipped line searches.

    Works in coordinates scaled to the unit box.  A sweep that improves the
    objective by no more than ``fatol`` ends the run; the run is then repeated
    from its end point with fresh coordinate directions until a whole run
    gains no more than ``fatol``, since a collapsed direction set can
    otherwise stall in a curved valley.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    lower, upper = _box(bounds, x0.size)
    width = upper - lower
    free = width > 0
    scale = np.where(free, width, 1.0)
    fun = _Tracked(f, lower, upper, maxfev, maximize)
    # directions live in unit-box coordinates; map them back with ``scale``
    line_xtol = max(xatol, 1e-12)

    def run(x, fx):
        dirs = [np.eye(x.size)[i] for i in np.flatnonzero(free)]
        while True:
            x_start, f_start = x, fx
            biggest, ibig = 0.0, 0
            for i, u in enumerate(dirs):
                before = fx
                x, fx = _line_minimize(fun, x, fx, u * scale, LINE_STEP, line_xtol)
                if before - fx > biggest:
                    biggest, ibig = before - fx, i
            if f_start - fx <= fatol or np.max(np.abs(x - x_start) / scale) <= xatol:
                return x, fx
            u_new = (x - x_start) / scale
            x_ext = np.clip(2 * x - x_start, lower, upper)
            f_ext = fun(x_ext)
            if f_ext < f_start:
                t = 2 * (f_start - 2 * fx + f_ext) * (f_start - fx - biggest) ** 2
                t -= biggest * (f_start - f_ext) ** 2
                if t < 0:
                    norm = np.linalg.norm(u_new)
                    x, fx = _line_minimize(fun, x, fx, u_new * scale, LINE_STEP, line_xtol)
                    dirs[ibig] = dirs[-1]
                    dirs[-1] = u_new / norm
            if f_ext < fx:
                x, fx = x_ext, f_ext

    try:
        x = np.clip(x0, lower, upper)
        fx = fun(x)
        if not free.any():
            return fun.result(True, False)
        while True:
            before = fx
            x, fx = run(x, fx)
            if before - fx <= fatol:
                return fun.result(True, False)
    except _BudgetExhausted:
        return fun.result(False, True)


@dataclass
class OptimizationResult:
    best_x: np.ndarray
    best_fidelity: float
    evaluations: int
    restarts_used: int
    seed: int
    wall_time: float
    protocol: Protocol
    family: str
    best_restart: int = 0
    exhausted_restarts: int = 0
    history: list | None = None
    settings: dict = field(default_factory=dict)


def optimize_protocol(
    problem,
    family,
    tau: float,
    restarts: int | None = None,
    seed: int = 0,
    *,
    method: str | None = None,
    maxfev: int | None = None,
    xatol: float = XATOL,
    fatol: float = FATOL,
    sampled_tol: float = DEFAULT_TOL,
    sampled_rtol: float = SAMPLED_RTOL,
    jitter: float = CRAB_JITTER,
    initial_step: float = INITIAL_STEP,
    stop_at: float | None = None,
    record_history: bool = False,
) -> OptimizationResult:
    """Maximize the fidelity over one protocol family at fixed duration.

    Bang families run Powell from uniformly random points of the parameter
    box; CRAB families redraw their frequencies on every restart and run
    adaptive Nelder-Mead from near-zero coefficients.  The best restart wins,
    ties going to the earlier one.  With ``stop_at`` set, restarts end as
    soon as that fidelity is reached.
    """
    family = ProtocolFamily.parse(family)
    defaults = CRAB_DEFAULTS if family.is_crab else BANG_DEFAULTS
    method = (method or defaults["method"]).lower()
    restarts = defaults["restarts"] if restarts is None else int(restarts)
    maxfev = defaults["maxfev"] if maxfev is None else int(maxfev)
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if method not in ("powell", "nelder-mead"):
        raise ValueError(f"unknown method {method!r}; valid: powell, nelder-mead")
    settings = dict(
        method=method, restarts=restarts, maxfev=maxfev, xatol=xatol, fatol=fatol,
        sampled_tol=sampled_tol, sampled_rtol=sampled_rtol, jitter=jitter,
        initial_step=initial_step, stop_at=stop_at,
    )

    def fid(p):
        return cost_fidelity(problem, p, sampled_tol, sampled_rtol)

    start = time.perf_counter()
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(restarts)]
    best = None
    history = [] if record_history else None
    total = 0
    exhausted = 0
    used = 0
    for index, rng in enumerate(rngs):
        used += 1
        if family.is_crab:
            template = family.template(problem, tau, seed=int(rng.integers(2**31)))
        else:
            template = family.template(problem, tau)
        x_init, lower, upper = template.parameters()
        if x_init.size == 0:
            f = fid(template)
            total += 1
            best = (f, x_init, template, index)
            if history is not None:
                history.append((total, f))
            break
        if family.is_crab:
            x0 = np.clip(x_init + rng.normal(0.0, jitter, x_init.size), lower, upper)
        else:
            x0 = rng.uniform(lower, upper)

        def objective(x, template=template):
            return 1.0 - fid(template.with_parameters(x))

        if method == "powell":
            res = powell(objective, x0, (lower, upper), xatol=xatol, fatol=fatol, maxfev=maxfev)
        else:
            res = nelder_mead_adaptive(
                objective, x0, (lower, upper), xatol=xatol, fatol=fatol,
                maxfev=maxfev, initial_step=initial_step,
            )
        exhausted += res.budget_exhausted
        f = 1.0 - res.value
        if history is not None:
            running = best[0] if best else -np.inf
            for i, v in res.history:
                running = max(running, 1.0 - v)
                history.append((total + i, running))
        total += res.nfev
        log.debug("restart %d: F=%.15f after %d evaluations", index, f, res.nfev)
        if best is None or f > best[0]:
            best = (f, res.x, template, index)
        if stop_at is not None and best[0] >= stop_at:
            break
    _, x_best, template, best_index = best
    protocol = template.with_parameters(x_best)
    x_canonical = protocol.parameters()[0]
    return OptimizationResult(
        best_x=x_canonical,
        best_fidelity=fid(protocol),
        evaluations=total,
        restarts_used=used,
        seed=int(seed),
        wall_time=time.perf_counter() - start,
        protocol=protocol,
        family=str(family),
        best_restart=best_index,
        exhausted_restarts=int(exhausted),
        history=history,
        settings=settings,
    )
