"""Gaussian kernels, replication-padded 2D convolution and its exact adjoint.

Output pixel ``(i, j)`` is the weighted sum of the input window
``[i-m, i-m+k-1] x [j-m, j-m+k-1]`` with ``m = k // 2``; indices falling off
the grid are clamped to the nearest edge (replication padding). Longitude may
instead wrap periodically. The kernel is applied as a correlation, weight
``W[a, c]`` multiplying input ``(i-m+a, j-m+c)``.

Because of the clamping, the transpose of this operator is *not* a padded
convolution: boundary pixels receive the accumulated weight of every window
position that was clamped onto them. ``convolve_adjoint`` scatters exactly
that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import ParameterError
from .grid import GridState

SMOOTHING_SIZE = 4
SMOOTHING_SIGMA2 = 8.0


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    k: int
    sigma2: float
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.k, self.k):
            raise ParameterError(f"weights must be {self.k}x{self.k}, got {w.shape}")
        if not np.all(w > 0):
            raise ParameterError("kernel weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ParameterError(f"kernel weights sum to {w.sum()!r}, expected 1")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def offset(self):
        return self.k // 2

    def sum_of_squares(self):
        return float(np.sum(self.weights**2))

    def __eq__(self, other):
        if not isinstance(other, GaussianKernel):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.weights, other.weights)

    __hash__ = None


def build_kernel(k, sigma2):
    """Normalised truncated Gaussian on a k x k stencil, peak at ``(k//2, k//2)``.

    ``sigma2 = math.inf`` yields the equal-weight (box) kernel.
    """
    if int(k) != k or k < 1:
        raise ParameterError(f"kernel size must be a positive integer, got {k}")
    if not sigma2 > 0:
        raise ParameterError(f"sigma2 must be positive, got {sigma2}")
    k = int(k)
    idx = np.arange(k) - k // 2
    if math.isinf(sigma2):
        raw = np.ones((k, k))
    else:
        raw = np.exp(-(idx[:, None] ** 2 + idx[None, :] ** 2) / (2.0 * sigma2))
    return GaussianKernel(k, float(sigma2), raw / raw.sum())


SMOOTHING_KERNEL = build_kernel(SMOOTHING_SIZE, SMOOTHING_SIGMA2)


# -- raw kernels: x has shape (batch, n_lat, n_lon) ----------------------------


@_accel.njit
def _conv_numba(x, w, periodic_lon):
    nb, nlat, nlon = x.shape
    k = w.shape[0]
    m = k // 2
    out = np.zeros_like(x)
    for b in range(nb):
        for i in range(nlat):
            for j in range(nlon):
                acc = 0.0
                for a in range(k):
                    ii = i - m + a
                    if ii < 0:
                        ii = 0
                    elif ii >= nlat:
                        ii = nlat - 1
                    for c in range(k):
                        jj = j - m + c
                        if periodic_lon:
                            jj = jj % nlon
                        elif jj < 0:
                            jj = 0
                        elif jj >= nlon:
                            jj = nlon - 1
                        acc += w[a, c] * x[b, ii, jj]
                out[b, i, j] = acc
    return out


@_accel.njit
def _conv_adjoint_numba(v, w, periodic_lon):
    nb, nlat, nlon = v.shape
    k = w.shape[0]
    m = k // 2
    out = np.zeros_like(v)
    for b in range(nb):
        for i in range(nlat):
            for j in range(nlon):
                val = v[b, i, j]
                for a in range(k):
                    ii = i - m + a
                    if ii < 0:
                        ii = 0
                    elif ii >= nlat:
                        ii = nlat - 1
                    for c in range(k):
                        jj = j - m + c
                        if periodic_lon:
                            jj = jj % nlon
                        elif jj < 0:
                            jj = 0
                        elif jj >= nlon:
                            jj = nlon - 1
                        out[b, ii, jj] += w[a, c] * val
    return out


def _pad_indices(n, k, periodic):
    m = k // 2
    raw = np.arange(-m, n + k - 1 - m)
    return raw % n if periodic else np.clip(raw, 0, n - 1)


def _conv_numpy(x, w, periodic_lon):
    _, nlat, nlon = x.shape
    k = w.shape[0]
    lat_idx = _pad_indices(nlat, k, False)
    lon_idx = _pad_indices(nlon, k, periodic_lon)
    padded = x[:, lat_idx][:, :, lon_idx]
    out = np.zeros_like(x)
    for a in range(k):
        for c in range(k):
            out += w[a, c] * padded[:, a : a + nlat, c : c + nlon]
    return out


def _conv_adjoint_numpy(v, w, periodic_lon):
    nb, nlat, nlon = v.shape
    k = w.shape[0]
    m = k // 2
    acc = np.zeros((nb, nlat + k - 1, nlon + k - 1))
    for a in range(k):
        for c in range(k):
            acc[:, a : a + nlat, c : c + nlon] += w[a, c] * v
    lat_idx = _pad_indices(nlat, k, False)
    lon_idx = _pad_indices(nlon, k, periodic_lon)
    # interior of the padded axis sits at [m, m+n); the fold relies on that
    assert lat_idx[m] == 0 and lon_idx[m] == 0
    out = _fold_at(acc, lat_idx, nlat, m, axis=1)
    return _fold_at(out, lon_idx, nlon, m, axis=2)


def _fold_at(acc, idx, n, m, axis):
    sl = [slice(None)] * acc.ndim
    sl[axis] = slice(m, m + n)
    out = acc[tuple(sl)].copy()
    for p in list(range(m)) + list(range(m + n, idx.size)):
        dst = [slice(None)] * acc.ndim
        src = [slice(None)] * acc.ndim
        dst[axis] = int(idx[p])
        src[axis] = p
        out[tuple(dst)] += acc[tuple(src)]
    return out


def convolve_array(x, weights, periodic_lon=False, backend=None):
    """Convolve a ``(batch, n_lat, n_lon)`` array; each batch slice independently."""
    fn = _accel.select(_conv_numba, _conv_numpy, backend)
    return fn(np.ascontiguousarray(x, dtype=np.float64), np.asarray(weights, dtype=np.float64), bool(periodic_lon))


def convolve_adjoint_array(v, weights, periodic_lon=False, backend=None):
    fn = _accel.select(_conv_adjoint_numba, _conv_adjoint_numpy, backend)
    return fn(np.ascontiguousarray(v, dtype=np.float64), np.asarray(weights, dtype=np.float64), bool(periodic_lon))


def convolve(state, kernel, periodic_lon=False, backend=None):
    out = convolve_array(state.values, kernel.weights, periodic_lon, backend)
    return GridState._trusted(state.geometry, out, state.time_index)


def convolve_adjoint(state, kernel, periodic_lon=False, backend=None):
    out = convolve_adjoint_array(state.values, kernel.weights, periodic_lon, backend)
    return GridState._trusted(state.geometry, out, state.time_index)


def smooth(state, kernel=None, periodic_lon=False, backend=None):
    """The stabilising smoother: convolution with the 4x4, sigma^2 = 8 kernel."""
    return convolve(state, SMOOTHING_KERNEL if kernel is None else kernel, periodic_lon, backend)
