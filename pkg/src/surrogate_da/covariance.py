"""Background covariance C = q B B^T and the gain K = C H^T (H C H^T + R)^-1.

B is the replication-padded convolution of :mod:`surrogate_da.conv`. The gain
only ever uses the diagonal of ``H C H^T + R``; when the kernel side equals
the observation stride the supports of distinct observed rows of B are
disjoint and that diagonal is the whole matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .conv import convolve_adjoint_array, convolve_array
from .errors import CapacityError, DimensionError, ParameterError, SingularGainError
from .grid import GridGeometry, GridState
from .obs import ThinningOperator, apply_HT

DENSE_LIMIT = 64


def default_q(kernel):
    return 0.5 / kernel.sum_of_squares()


@dataclass(frozen=True)
class BackgroundCovariance:
    kernel: object
    q: float
    periodic_lon: bool = False

    def __post_init__(self):
        if not self.q > 0:
            raise ParameterError(f"covariance scale q must be positive, got {self.q}")

    @classmethod
    def default(cls, kernel, periodic_lon=False):
        return cls(kernel, default_q(kernel), periodic_lon)


def apply_C_array(cov, v):
    w = cov.kernel.weights
    return cov.q * convolve_array(convolve_adjoint_array(v, w, cov.periodic_lon), w, cov.periodic_lon)


def apply_C(cov, v):
    return GridState._trusted(v.geometry, apply_C_array(cov, v.values), v.time_index)


def _axis_classes(n, k, periodic):
    """Per-index clamp pattern (relative offsets) along one axis."""
    m = k // 2
    keys = []
    for i in range(n):
        raw = np.arange(i - m, i - m + k)
        if periodic:
            rel = (raw % n - i) % n
        else:
            rel = np.clip(raw, 0, n - 1) - i
        keys.append(tuple(int(r) for r in rel))
    return keys


def _row_norm_sq(weights, lat_rel, lon_rel):
    # squared norm of one row of B: weights landing on the same pixel add first
    acc = {}
    for a, ra in enumerate(lat_rel):
        for c, rc in enumerate(lon_rel):
            acc[(ra, rc)] = acc.get((ra, rc), 0.0) + weights[a, c]
    return sum(v * v for v in acc.values())


def hcht_diagonal(cov, op):
    """diag(H C H^T) without forming C, one row-norm per boundary class."""
    g = op.geometry
    k = cov.kernel.k
    w = cov.kernel.weights
    lat_keys = _axis_classes(g.n_lat, k, False)
    lon_keys = _axis_classes(g.n_lon, k, cov.periodic_lon)
    cache = {}
    block = np.empty((op.lat_index.size, op.lon_index.size))
    for a, i in enumerate(op.lat_index):
        for b, j in enumerate(op.lon_index):
            key = (lat_keys[i], lon_keys[j])
            if key not in cache:
                cache[key] = _row_norm_sq(w, *key)
            block[a, b] = cache[key]
    return cov.q * np.broadcast_to(block, op.obs_shape).ravel()


@dataclass(frozen=True, eq=False)
class GainApplicator:
    covariance: BackgroundCovariance
    op: ThinningOperator
    innovation_diag: np.ndarray
    noise_variance: float

    def gain_array(self, innovation):
        innovation = np.asarray(innovation, dtype=np.float64).ravel()
        if innovation.size != self.op.d_y:
            raise DimensionError(f"innovation has {innovation.size} entries, expected {self.op.d_y}")
        scattered = apply_HT(innovation / self.innovation_diag, self.op).values
        return apply_C_array(self.covariance, scattered)

    def project(self, w):
        """(I - K H) w for a flat state vector."""
        w = np.asarray(w, dtype=np.float64)
        x = w.reshape(self.op.geometry.shape)
        hw = x[:, self.op.lat_index][:, :, self.op.lon_index].ravel()
        return (x - self.gain_array(hw)).ravel()

    def project_adjoint(self, w):
        """(I - K H)^T w = w - H^T D^-1 H C w."""
        w = np.asarray(w, dtype=np.float64)
        x = w.reshape(self.op.geometry.shape)
        cw = apply_C_array(self.covariance, x)
        hcw = cw[:, self.op.lat_index][:, :, self.op.lon_index].ravel()
        return (x - apply_HT(hcw / self.innovation_diag, self.op).values).ravel()

    def observe(self, w):
        x = np.asarray(w, dtype=np.float64).reshape(self.op.geometry.shape)
        return x[:, self.op.lat_index][:, :, self.op.lon_index].ravel()

    def gain_flat(self, innovation):
        return self.gain_array(innovation).ravel()


def build_gain(cov, op, r):
    if r < 0:
        raise ParameterError("noise variance must be nonnegative")
    diag = hcht_diagonal(cov, op) + float(r)
    if not np.all(diag > 0):
        raise SingularGainError("H C H^T + R has a nonpositive diagonal entry")
    diag = np.ascontiguousarray(diag)
    diag.flags.writeable = False
    return GainApplicator(cov, op, diag, float(r))


def apply_gain(g, innovation):
    return GridState._trusted(g.op.geometry, g.gain_array(innovation), 0)


class DiagonalityReport(NamedTuple):
    is_diagonal: bool
    max_off_diagonal: float


def assemble_hcht(cov, op):
    """Dense H C H^T for one feature, built column by column from apply_C.

    Features never couple, so the full matrix is block diagonal with this
    block repeated per feature.
    """
    g = op.geometry
    if g.n_lat > DENSE_LIMIT or g.n_lon > DENSE_LIMIT:
        raise CapacityError(f"dense assembly limited to {DENSE_LIMIT}x{DENSE_LIMIT} grids, got {g.n_lat}x{g.n_lon}")
    single = ThinningOperator(op.stride, GridGeometry(1, g.n_lat, g.n_lon, g.lat_values), op.lat_offset, op.lon_offset)
    li, lo = np.meshgrid(single.lat_index, single.lon_index, indexing="ij")
    li, lo = li.ravel(), lo.ravel()
    n_obs = li.size
    units = np.zeros((n_obs, g.n_lat, g.n_lon))
    units[np.arange(n_obs), li, lo] = 1.0
    cols = apply_C_array(cov, units)
    # row p of cols is C e_p; entry (p, q) of H C H^T is (C e_p) at observed point q
    return cols[:, li, lo]


def verify_diagonal(cov, op):
    m = assemble_hcht(cov, op)
    off = m - np.diag(np.diag(m))
    mx = float(np.max(np.abs(off))) if off.size else 0.0
    return DiagonalityReport(mx == 0.0, mx)


def format_diagonality_report(cov, op, report):
    g = op.geometry
    return "\n".join(
        [
            f"grid = {g.n_lat}x{g.n_lon}",
            f"kernel_size = {cov.kernel.k}",
            f"stride = {op.stride}",
            f"q = {cov.q!r}",
            f"diagonal = {str(report.is_diagonal).lower()}",
            f"max_off_diagonal = {report.max_off_diagonal!r}",
        ]
    ) + "\n"
