"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Every kernel exists in two semantically identical versions. The module-level
public names are bound at import time: numba is preferred when it imports
cleanly, unless the environment variable ``NNOCP_NO_NUMBA=1`` forces the
numpy path. Both versions stay importable through ``IMPLEMENTATIONS`` so the
benchmark suite (and the equivalence tests) can compare them directly.

Kernels kept here are the loop-heavy ones that do not reduce to a single
BLAS or sparse call: the five-point stencil application, the per-readout
magnetization recurrence and its parameter derivatives, and the per-pixel
dictionary matched filter.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("NNOCP_NO_NUMBA", "0") != "1"


# ---------------------------------------------------------------------------
# five-point Laplacian stencil, homogeneous Neumann, symmetric closure
# ---------------------------------------------------------------------------

def _laplacian_stencil_np(z: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(z)
    out[:, 1:-1] += z[:, 2:] - 2.0 * z[:, 1:-1] + z[:, :-2]
    out[:, 0] += z[:, 1] - z[:, 0]
    out[:, -1] += z[:, -2] - z[:, -1]
    out[1:-1, :] += z[2:, :] - 2.0 * z[1:-1, :] + z[:-2, :]
    out[0, :] += z[1, :] - z[0, :]
    out[-1, :] += z[-2, :] - z[-1, :]
    out /= h * h
    return out


def _laplacian_stencil_nb_impl(z, h):  # pragma: no cover - compiled
    ny, nx = z.shape
    out = np.zeros((ny, nx))
    for i in range(ny):
        for j in range(nx):
            acc = 0.0
            if 0 < j < nx - 1:
                acc += z[i, j + 1] - 2.0 * z[i, j] + z[i, j - 1]
            elif j == 0:
                acc += z[i, 1] - z[i, 0]
            else:
                acc += z[i, nx - 2] - z[i, nx - 1]
            if 0 < i < ny - 1:
                acc += z[i + 1, j] - 2.0 * z[i, j] + z[i - 1, j]
            elif i == 0:
                acc += z[1, j] - z[0, j]
            else:
                acc += z[ny - 2, j] - z[ny - 1, j]
            out[i, j] = acc / (h * h)
    return out


# ---------------------------------------------------------------------------
# per-readout magnetization recurrence (pulse at interval start, relaxation
# over the repetition time, read-out at interval end)
# ---------------------------------------------------------------------------

def _relax_factors(t, tr):
    # continuous extension: exp(-tr/t) -> 0 as t -> 0+, so 0 for t <= 0
    e = np.zeros_like(t)
    pos = t > 0.0
    e[pos] = np.exp(-tr / t[pos])
    return e


def _bloch_series_np(t1, t2, tr, flips, m0, me):
    n = t1.shape[0]
    nl = flips.shape[0]
    e1 = _relax_factors(t1, tr)
    e2 = _relax_factors(t2, tr)
    out = np.empty((n, nl, 3))
    mx = np.full(n, m0[0])
    my = np.full(n, m0[1])
    mz = np.full(n, m0[2])
    for idx in range(nl):
        sign = -1.0 if idx % 2 == 0 else 1.0
        c = np.cos(sign * flips[idx])
        s = np.sin(sign * flips[idx])
        ry = c * my - s * mz
        rz = s * my + c * mz
        mx = e2 * mx
        my = e2 * ry
        mz = e1 * rz + (1.0 - e1) * me
        out[:, idx, 0] = mx
        out[:, idx, 1] = my
        out[:, idx, 2] = mz
    return out


def _bloch_series_nb_impl(t1, t2, tr, flips, m0, me):  # pragma: no cover
    n = t1.shape[0]
    nl = flips.shape[0]
    out = np.empty((n, nl, 3))
    for k in prange(n):
        e1 = np.exp(-tr / t1[k]) if t1[k] > 0.0 else 0.0
        e2 = np.exp(-tr / t2[k]) if t2[k] > 0.0 else 0.0
        mx = m0[0]
        my = m0[1]
        mz = m0[2]
        for idx in range(nl):
            sign = -1.0 if idx % 2 == 0 else 1.0
            c = np.cos(sign * flips[idx])
            s = np.sin(sign * flips[idx])
            ry = c * my - s * mz
            rz = s * my + c * mz
            mx = e2 * mx
            my = e2 * ry
            mz = e1 * rz + (1.0 - e1) * me
            out[k, idx, 0] = mx
            out[k, idx, 1] = my
            out[k, idx, 2] = mz
    return out


def _bloch_jacobian_np(t1, t2, tr, flips, m0, me):
    n = t1.shape[0]
    nl = flips.shape[0]
    e1 = _relax_factors(t1, tr)
    e2 = _relax_factors(t2, tr)
    with np.errstate(divide="ignore", invalid="ignore"):
        de1 = np.where(t1 > 0.0, tr / (t1 * t1), 0.0) * e1
        de2 = np.where(t2 > 0.0, tr / (t2 * t2), 0.0) * e2
    series = np.empty((n, nl, 3))
    d1 = np.zeros((n, nl, 3))
    d2 = np.zeros((n, nl, 3))
    mx = np.full(n, m0[0])
    my = np.full(n, m0[1])
    mz = np.full(n, m0[2])
    gx1 = np.zeros(n)
    gy1 = np.zeros(n)
    gz1 = np.zeros(n)
    gx2 = np.zeros(n)
    gy2 = np.zeros(n)
    gz2 = np.zeros(n)
    for idx in range(nl):
        sign = -1.0 if idx % 2 == 0 else 1.0
        c = np.cos(sign * flips[idx])
        s = np.sin(sign * flips[idx])
        ry = c * my - s * mz
        rz = s * my + c * mz
        gy1_r = c * gy1 - s * gz1
        gz1_r = s * gy1 + c * gz1
        gy2_r = c * gy2 - s * gz2
        gz2_r = s * gy2 + c * gz2
        gx1 = e2 * gx1
        gy1 = e2 * gy1_r
        gz1 = de1 * rz + e1 * gz1_r - de1 * me
        gx2 = de2 * mx + e2 * gx2
        gy2 = de2 * ry + e2 * gy2_r
        gz2 = e1 * gz2_r
        mx = e2 * mx
        my = e2 * ry
        mz = e1 * rz + (1.0 - e1) * me
        series[:, idx, 0] = mx
        series[:, idx, 1] = my
        series[:, idx, 2] = mz
        d1[:, idx, 0] = gx1
        d1[:, idx, 1] = gy1
        d1[:, idx, 2] = gz1
        d2[:, idx, 0] = gx2
        d2[:, idx, 1] = gy2
        d2[:, idx, 2] = gz2
    return series, d1, d2


def _bloch_jacobian_nb_impl(t1, t2, tr, flips, m0, me):  # pragma: no cover
    n = t1.shape[0]
    nl = flips.shape[0]
    series = np.empty((n, nl, 3))
    d1 = np.zeros((n, nl, 3))
    d2 = np.zeros((n, nl, 3))
    for k in prange(n):
        e1 = np.exp(-tr / t1[k]) if t1[k] > 0.0 else 0.0
        e2 = np.exp(-tr / t2[k]) if t2[k] > 0.0 else 0.0
        de1 = (tr / (t1[k] * t1[k])) * e1 if t1[k] > 0.0 else 0.0
        de2 = (tr / (t2[k] * t2[k])) * e2 if t2[k] > 0.0 else 0.0
        mx = m0[0]
        my = m0[1]
        mz = m0[2]
        gx1 = 0.0
        gy1 = 0.0
        gz1 = 0.0
        gx2 = 0.0
        gy2 = 0.0
        gz2 = 0.0
        for idx in range(nl):
            sign = -1.0 if idx % 2 == 0 else 1.0
            c = np.cos(sign * flips[idx])
            s = np.sin(sign * flips[idx])
            ry = c * my - s * mz
            rz = s * my + c * mz
            gy1_r = c * gy1 - s * gz1
            gz1_r = s * gy1 + c * gz1
            gy2_r = c * gy2 - s * gz2
            gz2_r = s * gy2 + c * gz2
            gx1 = e2 * gx1
            gy1 = e2 * gy1_r
            gz1 = de1 * rz + e1 * gz1_r - de1 * me
            gx2 = de2 * mx + e2 * gx2
            gy2 = de2 * ry + e2 * gy2_r
            gz2 = e1 * gz2_r
            mx = e2 * mx
            my = e2 * ry
            mz = e1 * rz + (1.0 - e1) * me
            series[k, idx, 0] = mx
            series[k, idx, 1] = my
            series[k, idx, 2] = mz
            d1[k, idx, 0] = gx1
            d1[k, idx, 1] = gy1
            d1[k, idx, 2] = gz1
            d2[k, idx, 0] = gx2
            d2[k, idx, 1] = gy2
            d2[k, idx, 2] = gz2
    return series, d1, d2


# ---------------------------------------------------------------------------
# dictionary matched filter
# ---------------------------------------------------------------------------

def _match_dictionary_np(zr, zi, dr, di):
    npix = zr.shape[0]
    natoms = dr.shape[0]
    nrm2 = np.einsum("al,al->a", dr, dr) + np.einsum("al,al->a", di, di)
    nrm2 = np.maximum(nrm2, 1e-300)
    best = np.zeros(npix, dtype=np.int64)
    coeff = np.zeros(npix)
    chunk = max(1, int(4e6) // max(natoms, 1))
    for lo in range(0, npix, chunk):
        hi = min(npix, lo + chunk)
        re = zr[lo:hi] @ dr.T + zi[lo:hi] @ di.T
        im = zi[lo:hi] @ dr.T - zr[lo:hi] @ di.T
        score = (re * re + im * im) / nrm2
        idx = np.argmax(score, axis=1)
        best[lo:hi] = idx
        rows = np.arange(hi - lo)
        coeff[lo:hi] = re[rows, idx] / nrm2[idx]
    return best, coeff


def _match_dictionary_nb_impl(zr, zi, dr, di):  # pragma: no cover
    npix = zr.shape[0]
    natoms = dr.shape[0]
    nl = zr.shape[1]
    best = np.zeros(npix, dtype=np.int64)
    coeff = np.zeros(npix)
    nrm2 = np.empty(natoms)
    for a in range(natoms):
        acc = 0.0
        for t in range(nl):
            acc += dr[a, t] * dr[a, t] + di[a, t] * di[a, t]
        nrm2[a] = max(acc, 1e-300)
    for k in prange(npix):
        sbest = -1.0
        abest = 0
        rbest = 0.0
        for a in range(natoms):
            re = 0.0
            im = 0.0
            for t in range(nl):
                re += zr[k, t] * dr[a, t] + zi[k, t] * di[a, t]
                im += zi[k, t] * dr[a, t] - zr[k, t] * di[a, t]
            score = (re * re + im * im) / nrm2[a]
            if score > sbest:
                sbest = score
                abest = a
                rbest = re / nrm2[a]
        best[k] = abest
        coeff[k] = rbest
    return best, coeff


if HAVE_NUMBA:
    _laplacian_stencil_nb = njit(cache=True)(_laplacian_stencil_nb_impl)
    _bloch_series_nb = njit(cache=True, parallel=True)(_bloch_series_nb_impl)
    _bloch_jacobian_nb = njit(cache=True, parallel=True)(_bloch_jacobian_nb_impl)
    _match_dictionary_nb = njit(cache=True, parallel=True)(_match_dictionary_nb_impl)
else:  # pragma: no cover
    _laplacian_stencil_nb = None
    _bloch_series_nb = None
    _bloch_jacobian_nb = None
    _match_dictionary_nb = None

IMPLEMENTATIONS = {
    "laplacian_stencil": {"numpy": _laplacian_stencil_np, "numba": _laplacian_stencil_nb},
    "bloch_series_batch": {"numpy": _bloch_series_np, "numba": _bloch_series_nb},
    "bloch_jacobian_batch": {"numpy": _bloch_jacobian_np, "numba": _bloch_jacobian_nb},
    "match_dictionary": {"numpy": _match_dictionary_np, "numba": _match_dictionary_nb},
}

_PATH = "numba" if USE_NUMBA else "numpy"

laplacian_stencil = IMPLEMENTATIONS["laplacian_stencil"][_PATH]
bloch_series_batch = IMPLEMENTATIONS["bloch_series_batch"][_PATH]
bloch_jacobian_batch = IMPLEMENTATIONS["bloch_jacobian_batch"][_PATH]
match_dictionary = IMPLEMENTATIONS["match_dictionary"][_PATH]


def active_path() -> str:
    """Return which kernel family is bound: 'numba' or 'numpy'."""
    return _PATH
