"""Landau-Zener and Lipkin-Meshkov-Glick control problems.

Collective spin operators live in the maximal-spin Dicke basis ordered by
decreasing magnetization, ``|S, S>, |S, S-1>, ..., |S, -S>``, so that the
single-spin case reproduces the Pauli matrices divided by two.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bangopt.quantum import (
    HermitianOperator,
    StateVector,
    combine,
    fidelity,
    ground_state,
    spectral_gap,
)

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]])
SIGMA_Y = np.array([[0.0, -1j], [1j, 0.0]])
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]])

_HAMILTONIAN_CACHE_SIZE = 64


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """One ground-state preparation task ``H(g) = h0 + g h1``, ``g0 -> g1``."""

    h0: HermitianOperator
    h1: HermitianOperator
    g0: float
    g1: float
    g_max: float
    initial_state: StateVector
    target_state: StateVector
    label: str = ""
    N: int = 1
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    _aux: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, h0, h1, g0, g1, g_max, label="", N=1) -> ControlProblem:
        g0, g1, g_max = float(g0), float(g1), float(g_max)
        if not g_max > 0:
            raise ValueError(f"g_max must be positive, got {g_max}")
        for name, g in (("g0", g0), ("g1", g1)):
            if abs(g) > g_max:
                raise ValueError(f"|{name}| = {abs(g)} exceeds g_max = {g_max}")
        initial = ground_state(combine(h0, h1, g0)).state
        target = ground_state(combine(h0, h1, g1)).state
        return cls(h0, h1, g0, g1, g_max, initial, target, label, int(N))

    @property
    def dim(self) -> int:
        return self.h0.dim

    def hamiltonian(self, g: float) -> HermitianOperator:
        """``H(g)``, memoized so repeated values reuse their eigendecomposition."""
        g = float(g)
        op = self._cache.get(g)
        if op is None:
            op = combine(self.h0, self.h1, g)
            if len(self._cache) >= _HAMILTONIAN_CACHE_SIZE:
                self._cache.pop(next(iter(self._cache)))
            self._cache[g] = op
        return op

    def pair_bands(self):
        """``(offsets, bands0, bands1, norm0, norm1)`` of h0/h1 on a shared band layout."""
        packed = self._aux.get("pair_bands")
        if packed is None:
            d = self.dim
            off0, b0 = self.h0.bands()
            off1, b1 = self.h1.bands()
            offsets = np.union1d(off0, off1).astype(np.int64)
            bands0 = np.zeros((len(offsets), d), dtype=np.complex128)
            bands1 = np.zeros((len(offsets), d), dtype=np.complex128)
            for src_off, src, dst in ((off0, b0, bands0), (off1, b1, bands1)):
                for k, band in zip(src_off, src):
                    dst[np.searchsorted(offsets, k)] = band
            packed = (offsets, bands0, bands1, self.h0.norm_bound(), self.h1.norm_bound())
            self._aux["pair_bands"] = packed
        return packed

    def overlap_fidelity(self) -> float:
        """Fidelity reached with no evolution at all."""
        return fidelity(self.initial_state, self.target_state)


def collective_spin(N: int, axis: str) -> HermitianOperator:
    """Collective spin component ``S_axis`` for ``N`` spin-1/2 particles."""
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    N = int(N)
    S = N / 2
    m = S - np.arange(N + 1)
    # <m+1|S+|m> for the lower state m of each adjacent pair
    ladder = np.sqrt(S * (S + 1) - m[1:] * (m[1:] + 1))
    if axis == "z":
        return HermitianOperator.from_bands(N + 1, {0: m})
    if axis == "x":
        return HermitianOperator.from_bands(N + 1, {0: np.zeros(N + 1), 1: ladder / 2})
    if axis == "y":
        return HermitianOperator.from_bands(N + 1, {0: np.zeros(N + 1), 1: -0.5j * ladder})
    raise ValueError(f"axis must be one of 'x', 'y', 'z', got {axis!r}")


def sx_squared(N: int) -> HermitianOperator:
    """``S_x^2`` as a banded operator (bandwidth 2)."""
    N = int(N)
    S = N / 2
    m = S - np.arange(N + 1)
    diag = (S * (S + 1) - m**2) / 2
    ladder = np.sqrt(S * (S + 1) - m[1:] * (m[1:] + 1))
    bands = {0: diag}
    if N >= 2:
        bands[2] = ladder[:-1] * ladder[1:] / 4
    return HermitianOperator.from_bands(N + 1, bands)


def lmg_operators(N: int, sector: str | None = None) -> tuple[HermitianOperator, HermitianOperator]:
    """``(H0, H1) = (S_z, -S_x^2 / N)``, optionally restricted to one parity sector.

    ``sector="even"`` keeps the states with even ``m + N/2`` (the sector of the
    fully polarized state), ``"odd"`` the complement.  Within a sector the
    operators are tridiagonal.
    """
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    N = int(N)
    sz = collective_spin(N, "z")
    sx2 = sx_squared(N)
    if sector is None:
        h1_off, h1_bands = sx2.bands()
        return sz, HermitianOperator.from_bands(
            N + 1, {int(k): -b[: N + 1 - k].real / N for k, b in zip(h1_off, h1_bands)}
        )
    if sector not in ("even", "odd"):
        raise ValueError(f"sector must be 'even', 'odd' or None, got {sector!r}")
    # index i has m + N/2 = N - i
    start = N % 2 if sector == "even" else 1 - N % 2
    idx = np.arange(start, N + 1, 2)
    if idx.size == 0:
        raise ValueError(f"sector {sector!r} is empty for N={N}")
    m = N / 2 - idx
    offsets, packed = sx2.bands()
    diag = packed[0].real
    h0 = HermitianOperator.from_bands(idx.size, {0: m})
    h1_bands = {0: -diag[idx] / N}
    if idx.size > 1:
        band2 = packed[list(offsets).index(2)].real
        h1_bands[1] = -band2[idx[:-1]] / N
    return h0, HermitianOperator.from_bands(idx.size, h1_bands)


def lz_problem(g0: float = -5.0, g1: float = 0.0, g_max: float = 10.0) -> ControlProblem:
    """Landau-Zener problem ``H(g) = sigma_x + g sigma_z``."""
    return ControlProblem.build(
        HermitianOperator(SIGMA_X), HermitianOperator(SIGMA_Z), g0, g1, g_max, label="lz", N=1
    )


def lmg_problem(
    N: int, g0: float = 0.0, g1: float = 1.0, g_max: float = 1.7, sector: str | None = None
) -> ControlProblem:
    """LMG problem ``H(g) = S_z - (g / N) S_x^2`` in the maximal-spin sector.

    ``sector="even"`` restricts further to the parity sector that contains
    both ground states; fidelities are unchanged and the dimension halves.
    """
    if int(N) != N or N < 2:
        raise ValueError(f"LMG needs N >= 2, got {N}")
    h0, h1 = lmg_operators(N, sector)
    label = "lmg" if sector is None else f"lmg[{sector}]"
    return ControlProblem.build(h0, h1, g0, g1, g_max, label=label, N=int(N))


def lmg_hamiltonian(N: int, g: float, sector: str | None = None) -> HermitianOperator:
    h0, h1 = lmg_operators(N, sector)
    return combine(h0, h1, g)


def critical_gap(N: int, sector: str | None = None) -> float:
    """Spectral gap of the LMG Hamiltonian at the critical point ``g = 1``.

    With ``sector=None`` this is the gap between the two lowest levels
    overall; ``sector="even"`` gives the gap inside the ground state's
    parity sector.
    """
    if int(N) != N or N < 2:
        raise ValueError(f"LMG needs N >= 2, got {N}")
    return spectral_gap(lmg_hamiltonian(N, 1.0, sector))


def parity_operator(N: int) -> np.ndarray:
    """Diagonal of ``exp(i pi (S_z + N/2))`` in the Dicke basis."""
    i = np.arange(int(N) + 1)
    return np.where((int(N) - i) % 2 == 0, 1.0, -1.0)
