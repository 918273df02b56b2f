"""Jitted inner loops for banded Hermitian operators.

Bands are stored row-aligned: ``bands[b, i] = H[i, i + offsets[b]]`` for
``offsets[b] >= 0``; the lower triangle is implied by Hermiticity.  Rows past
``d - offsets[b]`` are padding and never read.
"""
import numpy as np
from numba import njit

# Taylor sub-steps are taken with ||H|| * h below this bound.
_TAYLOR_STEP_BOUND = 0.5
_TAYLOR_MAX_TERMS = 60


@njit(cache=True)
def banded_matvec(offsets, bands, x, out):
    d = x.shape[0]
    for i in range(d):
        out[i] = 0.0
    for b in range(offsets.shape[0]):
        k = offsets[b]
        if k == 0:
            for i in range(d):
                out[i] += bands[b, i] * x[i]
        else:
            for i in range(d - k):
                h = bands[b, i]
                out[i] += h * x[i + k]
                out[i + k] += np.conj(h) * x[i]
    return out


@njit(cache=True)
def _pair_matvec(offsets, bands0, bands1, g, x, out):
    d = x.shape[0]
    for i in range(d):
        out[i] = 0.0
    for b in range(offsets.shape[0]):
        k = offsets[b]
        if k == 0:
            for i in range(d):
                out[i] += (bands0[b, i] + g * bands1[b, i]) * x[i]
        else:
            for i in range(d - k):
                h = bands0[b, i] + g * bands1[b, i]
                out[i] += h * x[i + k]
                out[i + k] += np.conj(h) * x[i]
    return out


@njit(cache=True)
def taylor_slices(offsets, bands0, bands1, norm0, norm1, gs, dts, psi):
    """Apply exp(-i (H0 + g_k H1) dt_k) for each slice k in order.

    Each factor is summed as a Taylor series to double precision, with
    sub-stepping so the series argument stays below ``_TAYLOR_STEP_BOUND``.
    ``norm0``/``norm1`` are upper bounds on the operator norms of H0/H1.
    """
    d = psi.shape[0]
    v = psi.copy()
    term = np.empty(d, np.complex128)
    tmp = np.empty(d, np.complex128)
    acc = np.empty(d, np.complex128)
    for s in range(gs.shape[0]):
        g = gs[s]
        dt = dts[s]
        if dt == 0.0:
            continue
        bound = (norm0 + abs(g) * norm1) * abs(dt)
        nsub = 1
        if bound > _TAYLOR_STEP_BOUND:
            nsub = int(np.ceil(bound / _TAYLOR_STEP_BOUND))
        h = dt / nsub
        for _ in range(nsub):
            scale = 0.0
            for i in range(d):
                term[i] = v[i]
                acc[i] = v[i]
                scale += v[i].real ** 2 + v[i].imag ** 2
            for n in range(1, _TAYLOR_MAX_TERMS):
                _pair_matvec(offsets, bands0, bands1, g, term, tmp)
                c = -1j * h / n
                nrm = 0.0
                for i in range(d):
                    term[i] = c * tmp[i]
                    acc[i] += term[i]
                    nrm += term[i].real ** 2 + term[i].imag ** 2
                if nrm <= 1e-36 * scale:
                    break
            for i in range(d):
                v[i] = acc[i]
    return v
