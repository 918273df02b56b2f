"""Evolve the initial state of a control problem through a protocol and score it."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from bangopt import _kernels
from bangopt.protocols import Protocol
from bangopt.quantum import StateVector, apply_propagator, fidelity

DEFAULT_TOL = 1e-10
# Fidelities above 1 - PRECISION_FLOOR are at the double-precision noise floor.
PRECISION_FLOOR = 1e-12
START_STEPS = 64
MAX_STEPS = 2**20


class EvolutionConvergenceError(RuntimeError):
    pass


class ConvergedEvolution(NamedTuple):
    state: StateVector
    steps: int
    deltas: tuple


def evolve_segments(problem, segments, state: StateVector | None = None) -> StateVector:
    """Apply ``exp(-i dt H(g))`` for each ``(g, dt)`` in order; ``dt`` may be negative."""
    psi = problem.initial_state if state is None else state
    for g, dt in segments:
        psi = apply_propagator(problem.hamiltonian(g), dt, psi)
    return psi


def evolve_piecewise(problem, p: Protocol) -> StateVector:
    """Exact evolution through a piecewise-constant protocol, one factor per segment."""
    return evolve_segments(problem, p.segments())


def midpoint_values(p: Protocol, steps: int) -> np.ndarray:
    """Clamped protocol values at the midpoints of ``steps`` uniform slices."""
    t = (np.arange(steps) + 0.5) * (p.tau / steps)
    return np.asarray(p.evaluate(t), dtype=float)


def _run_slices(problem, gs, dts, psi: StateVector) -> StateVector:
    offsets, bands0, bands1, norm0, norm1 = problem.pair_bands()
    out = _kernels.taylor_slices(
        offsets, bands0, bands1, norm0, norm1,
        np.ascontiguousarray(gs, dtype=float), np.ascontiguousarray(dts, dtype=float),
        np.array(psi.amplitudes),
    )
    return StateVector(out)


def evolve_sampled(problem, p: Protocol, steps: int) -> StateVector:
    """Midpoint piecewise-constant approximation of the time-ordered evolution."""
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    steps = int(steps)
    if p.tau == 0:
        return problem.initial_state
    gs = midpoint_values(p, steps)
    return _run_slices(problem, gs, np.full(steps, p.tau / steps), problem.initial_state)


def evolve_converged(
    problem,
    p: Protocol,
    tol: float = DEFAULT_TOL,
    rtol: float = 0.0,
    start_steps: int = START_STEPS,
    max_steps: int = MAX_STEPS,
) -> ConvergedEvolution:
    """Double the slice count until the target fidelity settles.

    Converged once successive fidelities differ by less than
    ``max(tol, rtol * (1 - F))``; with the default ``rtol=0`` the criterion
    is purely absolute.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    steps = int(start_steps)
    state = evolve_sampled(problem, p, steps)
    prev = fidelity(state, problem.target_state)
    deltas = []
    while True:
        steps *= 2
        if steps > max_steps:
            raise EvolutionConvergenceError(
                f"no convergence within {max_steps} steps; last fidelity change {deltas[-1]:.3e}"
            )
        state = evolve_sampled(problem, p, steps)
        f = fidelity(state, problem.target_state)
        deltas.append(abs(f - prev))
        if deltas[-1] < max(tol, rtol * (1.0 - f)):
            return ConvergedEvolution(state, steps, tuple(deltas))
        prev = f


def final_state(problem, p: Protocol, tol: float = DEFAULT_TOL, rtol: float = 0.0) -> StateVector:
    if p.piecewise:
        return evolve_piecewise(problem, p)
    return evolve_converged(problem, p, tol, rtol).state


def cost_fidelity(problem, p: Protocol, tol: float = DEFAULT_TOL, rtol: float = 0.0) -> float:
    """Fidelity between the evolved state and the target ground state."""
    return fidelity(final_state(problem, p, tol, rtol), problem.target_state)


def report_fidelity(f: float) -> tuple[float, bool]:
    """Clamp to the precision floor; the flag marks values that were clamped."""
    ceiling = 1.0 - PRECISION_FLOOR
    return (ceiling, True) if f > ceiling else (float(f), False)


def trajectory(problem, p: Protocol, samples: int, tol: float = DEFAULT_TOL, rtol: float = 0.0):
    """States at ``samples`` uniformly spaced times, as ``[(t, StateVector), ...]``.

    Uses the same slicing as :func:`final_state`, so the last entry is that
    evolution's output.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    if p.piecewise:
        pieces = p.segments()
        kernel = False
    else:
        steps = evolve_converged(problem, p, tol, rtol).steps
        pieces = [(g, p.tau / steps) for g in midpoint_values(p, steps)]
        kernel = True
    times = np.linspace(0.0, p.tau, samples)
    edges = np.cumsum([0.0] + [dt for _, dt in pieces])
    psi = problem.initial_state
    out = [(0.0, psi)]
    now = 0.0
    for t_next in times[1:]:
        chunk = []
        for (g, _), lo, hi in zip(pieces, edges[:-1], edges[1:]):
            a, b = max(lo, now), min(hi, t_next)
            if b > a:
                chunk.append((g, b - a))
        if t_next == times[-1]:
            # close any rounding gap so the final state covers the full duration
            covered = now + sum(dt for _, dt in chunk)
            if chunk and covered < p.tau:
                chunk[-1] = (chunk[-1][0], chunk[-1][1] + p.tau - covered)
        if chunk:
            if kernel:
                gs, dts = zip(*chunk)
                psi = _run_slices(problem, gs, dts, psi)
            else:
                psi = evolve_segments(problem, chunk, psi)
        now = t_next
        out.append((float(t_next), psi))
    return out


def bloch_vector(state: StateVector) -> np.ndarray:
    """``(<sx>, <sy>, <sz>)`` of a two-level state."""
    if state.dim != 2:
        raise ValueError("Bloch coordinates need a two-level state")
    a, b = state.amplitudes
    return np.array([2 * (np.conj(a) * b).real, 2 * (np.conj(a) * b).imag, abs(a) ** 2 - abs(b) ** 2])
