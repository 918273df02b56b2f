"""State vectors, Hermitian operators, ground states and propagators.

Energies and times are dimensionless (in units of the model energy scale).
Operators are either dense or banded; banded operators keep only their upper
diagonals, which is what makes the large collective-spin systems tractable.
"""
from __future__ import annotations

import threading
from typing import NamedTuple

import numpy as np
import scipy.linalg

from bangopt import _kernels

# Above this dimension ground states come from banded partial solvers.
DENSE_MAX_DIM = 512
# Above this dimension banded propagation goes through the matrix-free Lanczos
# path: its cost tracks the energy spread of the state, not the dimension.
PROPAGATOR_DENSE_MAX_DIM = 192
# Ground states closer than this to the next level are flagged as degenerate.
DEGENERACY_TOL = 1e-10
HERMITICITY_TOL = 1e-12
# Default accuracy (L2) of one Lanczos propagation on the dispatch path.
KRYLOV_TOL = 1e-10
_LANCZOS_CHECK_EVERY = 4


class KrylovConvergenceError(RuntimeError):
    """Raised when the Lanczos propagator cannot reach the requested accuracy."""


class StateVector:
    """Normalized complex amplitude vector (read-only)."""

    __slots__ = ("amplitudes",)

    def __init__(self, amplitudes):
        amps = np.array(amplitudes, dtype=np.complex128).ravel()
        norm = np.linalg.norm(amps)
        if amps.size == 0 or not np.isfinite(norm) or norm == 0.0:
            raise ValueError("state vector must be finite and nonzero")
        amps /= norm
        amps.flags.writeable = False
        self.amplitudes = amps

    @property
    def dim(self) -> int:
        return self.amplitudes.shape[0]

    def __len__(self):
        return self.dim

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.amplitudes, dtype=dtype)

    def __repr__(self):
        return f"StateVector(dim={self.dim})"

    @classmethod
    def basis(cls, dim: int, index: int) -> StateVector:
        amps = np.zeros(dim, dtype=np.complex128)
        amps[index] = 1.0
        return cls(amps)


class HermitianOperator:
    """Hermitian matrix with a lazily computed, cached eigendecomposition.

    Build from a dense matrix, or with :meth:`from_bands` for banded
    operators, which then support matrix-free products and never need the
    dense matrix unless it is asked for.
    """

    def __init__(self, matrix, *, check: bool = True):
        mat = np.asarray(matrix)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {mat.shape}")
        if not np.iscomplexobj(mat):
            mat = mat.astype(np.float64)
        else:
            mat = mat.astype(np.complex128)
            if np.all(mat.imag == 0):
                mat = mat.real.copy()
        if check and not np.allclose(mat, mat.conj().T, rtol=0, atol=HERMITICITY_TOL):
            raise ValueError("matrix is not Hermitian")
        mat.flags.writeable = False
        self._init(mat.shape[0])
        self._matrix = mat

    def _init(self, dim):
        self.dim = dim
        self._matrix = None
        self._bands = None
        self._offsets = None
        self._banded = False
        self._eig = None
        self._lock = threading.Lock()

    @classmethod
    def from_bands(cls, dim: int, bands: dict) -> HermitianOperator:
        """Operator with ``H[i, i + k] = bands[k][i]`` for each ``k >= 0``.

        The main diagonal must be real; lower diagonals follow by Hermiticity.
        """
        offsets = sorted(int(k) for k in bands)
        if not offsets or offsets[0] < 0 or offsets[-1] >= max(dim, 1):
            raise ValueError(f"band offsets {offsets} invalid for dimension {dim}")
        packed = np.zeros((len(offsets), dim), dtype=np.complex128)
        for row, k in enumerate(offsets):
            values = np.asarray(bands[k])
            if values.shape != (dim - k,):
                raise ValueError(f"band {k} must have length {dim - k}")
            packed[row, : dim - k] = values
        if 0 in offsets and np.max(np.abs(packed[offsets.index(0)].imag), initial=0) > HERMITICITY_TOL:
            raise ValueError("main diagonal of a Hermitian operator must be real")
        op = cls.__new__(cls)
        op._init(dim)
        op._offsets = np.array(offsets, dtype=np.int64)
        op._bands = packed
        op._banded = True
        return op

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def __repr__(self):
        kind = "banded" if self._banded else "dense"
        return f"HermitianOperator(dim={self.dim}, {kind})"

    @property
    def is_banded(self) -> bool:
        return self._banded

    @property
    def is_real(self) -> bool:
        if self._banded:
            return not np.any(self._bands.imag)
        return not np.iscomplexobj(self._matrix)

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            d = self.dim
            dtype = np.float64 if self.is_real else np.complex128
            mat = np.zeros((d, d), dtype=dtype)
            for k, band in zip(self._offsets, self._bands):
                vals = band[: d - k] if dtype is np.complex128 else band[: d - k].real
                idx = np.arange(d - k)
                mat[idx, idx + k] = vals
                if k:
                    mat[idx + k, idx] = np.conj(vals)
            mat.flags.writeable = False
            self._matrix = mat
        return self._matrix

    def bands(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(offsets, packed_bands)``; dense operators are packed on demand."""
        if self._offsets is None:
            mat = self.matrix
            d = self.dim
            offsets = [k for k in range(d) if k == 0 or np.any(np.diagonal(mat, k))]
            packed = np.zeros((len(offsets), d), dtype=np.complex128)
            for row, k in enumerate(offsets):
                packed[row, : d - k] = np.diagonal(mat, k)
            self._offsets = np.array(offsets, dtype=np.int64)
            self._bands = packed
        return self._offsets, self._bands

    def norm_bound(self) -> float:
        """Upper bound on the spectral norm (maximum absolute row sum)."""
        offsets, packed = self.bands()
        d = self.dim
        rows = np.zeros(d)
        for k, band in zip(offsets, np.abs(packed)):
            rows[: d - k] += band[: d - k]
            if k:
                rows[k:] += band[: d - k]
        return float(rows.max())

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.complex128)
        if not self._banded:
            return self.matrix @ x
        offsets, packed = self.bands()
        return _kernels.banded_matvec(offsets, packed, x, np.empty_like(x))

    def _banded_upper(self):
        offsets, packed = self.bands()
        u = int(offsets[-1])
        d = self.dim
        real = self.is_real
        a_band = np.zeros((u + 1, d), dtype=np.float64 if real else np.complex128)
        for k, band in zip(offsets, packed):
            vals = band[: d - k].real if real else band[: d - k]
            a_band[u - k, k:] = vals
        return a_band

    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        """Full eigendecomposition ``(eigenvalues ascending, eigenvectors)``."""
        if self._eig is None:
            with self._lock:
                if self._eig is None:
                    w, v = self._tridiagonal_eigh() or scipy.linalg.eigh(self.matrix)
                    w.flags.writeable = False
                    v.flags.writeable = False
                    self._eig = (w, v)
        return self._eig

    def _tridiagonal_eigh(self):
        # real tridiagonal operators (parity sectors) have a cheaper dedicated solver
        if not self._banded or self.dim < 3 or not self.is_real:
            return None
        offsets = [int(k) for k in self._offsets]
        if offsets not in ([0, 1], [1]):
            return None
        diag = self._bands[0].real if offsets[0] == 0 else np.zeros(self.dim)
        off = self._bands[-1, : self.dim - 1].real
        return scipy.linalg.eigh_tridiagonal(np.ascontiguousarray(diag), np.ascontiguousarray(off))

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.eigh()[0]

    @property
    def eigenvectors(self) -> np.ndarray:
        return self.eigh()[1]

    def lowest(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Lowest ``k`` eigenpairs, avoiding a full decomposition for large banded operators."""
        k = min(k, self.dim)
        if self._eig is None and self._banded and self.dim > DENSE_MAX_DIM:
            w, v = scipy.linalg.eig_banded(
                self._banded_upper(), select="i", select_range=(0, k - 1)
            )
            return w, v
        w, v = self.eigh()
        return w[:k], v[:, :k]


class GroundState(NamedTuple):
    energy: float
    state: StateVector
    degenerate: bool


class Propagator:
    """Unitary time-evolution matrix."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.complex128)

    def __matmul__(self, other):
        if isinstance(other, StateVector):
            return StateVector(self.matrix @ other.amplitudes)
        if isinstance(other, Propagator):
            return Propagator(self.matrix @ other.matrix)
        return NotImplemented

    def unitarity_error(self) -> float:
        d = self.matrix.shape[0]
        return float(np.max(np.abs(self.matrix.conj().T @ self.matrix - np.eye(d))))


def combine(h0: HermitianOperator, h1: HermitianOperator, g: float) -> HermitianOperator:
    """Return ``h0 + g * h1``."""
    if h0.dim != h1.dim:
        raise ValueError(f"dimension mismatch: {h0.dim} vs {h1.dim}")
    g = float(g)
    if h0.is_banded and h1.is_banded:
        d = h0.dim
        merged = {}
        for op, scale in ((h0, 1.0), (h1, g)):
            offsets, packed = op.bands()
            for k, band in zip(offsets, packed):
                k = int(k)
                merged[k] = merged.get(k, 0) + scale * band[: d - k]
        if all(not np.any(np.asarray(b).imag) for b in merged.values()):
            merged = {k: np.asarray(b).real for k, b in merged.items()}
        return HermitianOperator.from_bands(d, merged)
    return HermitianOperator(h0.matrix + g * h1.matrix, check=False)


def ground_state(h: HermitianOperator) -> GroundState:
    w, v = h.lowest(2)
    degenerate = len(w) > 1 and (w[1] - w[0]) < DEGENERACY_TOL
    return GroundState(float(w[0]), StateVector(v[:, 0]), bool(degenerate))


def spectral_gap(h: HermitianOperator) -> float:
    """Difference between the two lowest eigenvalues."""
    if h.dim < 2:
        raise ValueError("spectral gap needs dimension >= 2")
    w, _ = h.lowest(2)
    return float(max(w[1] - w[0], 0.0))


def propagator(h: HermitianOperator, dt: float) -> Propagator:
    """``exp(-i h dt)`` from the eigendecomposition."""
    w, v = h.eigh()
    return Propagator((v * np.exp(-1j * w * dt)) @ v.conj().T)


def apply_propagator(h: HermitianOperator, dt: float, psi: StateVector) -> StateVector:
    """``exp(-i h dt) psi``: spectral for small operators, Lanczos above ``PROPAGATOR_DENSE_MAX_DIM``."""
    if dt == 0:
        return psi
    if h.dim > PROPAGATOR_DENSE_MAX_DIM and h.is_banded:
        return apply_propagator_krylov(h, dt, psi, KRYLOV_TOL)
    w, v = h.eigh()
    coeffs = v.conj().T @ psi.amplitudes
    return StateVector(v @ (np.exp(-1j * w * dt) * coeffs))


def _lanczos_step(h, dt, v0, tol, max_dim):
    """One Lanczos approximation of ``exp(-i h dt) v0``; returns ``(vector, error_estimate)``.

    Convergence is checked every ``_LANCZOS_CHECK_EVERY`` vectors by comparing
    against the previous checkpoint, which overestimates the current error.
    """
    d = v0.shape[0]
    m_max = min(max_dim, d)
    basis = np.empty((m_max, d), dtype=np.complex128)
    alpha = np.empty(m_max)
    beta = np.empty(m_max)
    basis[0] = v0
    scale = h.norm_bound() or 1.0
    prev = None
    err = np.inf
    for j in range(m_max):
        w = h.matvec(basis[j])
        alpha[j] = np.vdot(basis[j], w).real
        w -= alpha[j] * basis[j]
        if j:
            w -= beta[j - 1] * basis[j - 1]
        # full reorthogonalization against the stored basis
        w -= np.conj(np.conj(w) @ basis[: j + 1].T) @ basis[: j + 1]
        beta[j] = np.linalg.norm(w)
        m = j + 1
        breakdown = beta[j] <= 1e-14 * scale
        if m % _LANCZOS_CHECK_EVERY == 0 or breakdown or m == m_max:
            if m == 1:
                coeffs = np.array([np.exp(-1j * alpha[0] * dt)])
            else:
                theta, s = scipy.linalg.eigh_tridiagonal(alpha[:m], beta[: m - 1])
                coeffs = s @ (np.exp(-1j * theta * dt) * s[0])
            if breakdown:
                return coeffs @ basis[:m], 0.0
            if prev is not None:
                k = prev.shape[0]
                err = np.sqrt(np.sum(np.abs(coeffs[:k] - prev) ** 2) + np.sum(np.abs(coeffs[k:]) ** 2))
                if err < tol:
                    return coeffs @ basis[:m], err
            prev = coeffs
        if m < m_max:
            basis[m] = w / beta[j]
    return None, err


def apply_propagator_krylov(
    h: HermitianOperator,
    dt: float,
    psi: StateVector,
    tol: float = KRYLOV_TOL,
    max_dim: int = 100,
    max_substeps: int = 4096,
) -> StateVector:
    """Approximate ``exp(-i h dt) psi`` in a Lanczos subspace.

    The subspace grows until successive approximations differ by less than
    ``tol``; if ``max_dim`` is hit the step is split into more sub-steps,
    each held to ``tol / substeps``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if dt == 0:
        return psi
    substeps = 1
    while substeps <= max_substeps:
        v = np.array(psi.amplitudes)
        h_dt = dt / substeps
        worst = 0.0
        for _ in range(substeps):
            v, err = _lanczos_step(h, h_dt, v, tol / substeps, max_dim)
            if v is None:
                worst = err
                break
            worst = max(worst, err)
        if v is not None:
            return StateVector(v)
        substeps *= 2
    raise KrylovConvergenceError(
        f"Lanczos propagation did not converge: residual estimate {worst:.3e} "
        f"with subspace dimension {max_dim} and {max_substeps} sub-steps"
    )


def fidelity(psi: StateVector, phi: StateVector) -> float:
    """Squared overlap ``|<psi|phi>|^2``."""
    if psi.dim != phi.dim:
        raise ValueError(f"dimension mismatch: {psi.dim} vs {phi.dim}")
    return float(min(abs(np.vdot(psi.amplitudes, phi.amplitudes)) ** 2, 1.0))
