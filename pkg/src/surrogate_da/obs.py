"""Grid-thinning observations, the observation operator H and the
interpolation baseline.

H keeps every feature at latitude rows ``lat_offset, lat_offset + k, ...`` and
longitude columns ``lon_offset, lon_offset + k, ...``. Observation vectors are
ordered feature-major, then observed row, then observed column, so an
observation vector reshapes directly onto the thinned grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conv import convolve
from .errors import DimensionError, ParameterError
from .grid import GridGeometry, GridState


@dataclass(frozen=True)
class ThinningOperator:
    stride: int
    geometry: GridGeometry
    lat_offset: int = 0
    lon_offset: int = 0

    def __post_init__(self):
        k = self.stride
        if int(k) != k or k < 1:
            raise ParameterError(f"stride must be a positive integer, got {k}")
        for name, n in (("lat_offset", self.geometry.n_lat), ("lon_offset", self.geometry.n_lon)):
            off = getattr(self, name)
            if not 0 <= off < k:
                raise ParameterError(f"{name} must lie in [0, {k}), got {off}")
            if off >= n:
                raise ParameterError(f"{name}={off} leaves no observed points on an axis of length {n}")

    @property
    def lat_index(self):
        return np.arange(self.lat_offset, self.geometry.n_lat, self.stride)

    @property
    def lon_index(self):
        return np.arange(self.lon_offset, self.geometry.n_lon, self.stride)

    @property
    def obs_shape(self):
        return (self.geometry.n_features, self.lat_index.size, self.lon_index.size)

    @property
    def d_y(self):
        f, a, b = self.obs_shape
        return f * a * b

    @property
    def d_x(self):
        return self.geometry.size

    def obs_geometry(self):
        lats = tuple(self.geometry.lat_values[j] for j in self.lat_index)
        return GridGeometry(self.geometry.n_features, len(lats), self.lon_index.size, lats)

    def flat_indices(self):
        """Indices into the flat state vector, in observation order."""
        f, nlat, nlon = self.geometry.shape
        fi, li, lo = np.meshgrid(np.arange(f), self.lat_index, self.lon_index, indexing="ij")
        return ((fi * nlat + li) * nlon + lo).ravel()


@dataclass(frozen=True, eq=False)
class ObservationBatch:
    values: np.ndarray
    time_index: int
    noise_variance: float

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).ravel()
        vals.flags.writeable = False
        if self.noise_variance < 0:
            raise ParameterError("noise variance must be nonnegative")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "time_index", int(self.time_index))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))

    def __len__(self):
        return self.values.size


def _check_geometry(state, op):
    if state.geometry != op.geometry:
        raise DimensionError(f"state geometry {state.geometry.shape} does not match operator {op.geometry.shape}")


def apply_H(state, op):
    _check_geometry(state, op)
    return state.values[:, op.lat_index][:, :, op.lon_index].ravel()


def apply_HT(vector, op, time_index=0):
    """Scatter an observation-space vector onto a zero state."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.size != op.d_y:
        raise DimensionError(f"expected {op.d_y} observation values, got {vector.size}")
    out = np.zeros(op.geometry.shape)
    out[:, op.lat_index[:, None], op.lon_index[None, :]] = vector.reshape(op.obs_shape)
    return GridState._trusted(op.geometry, out, time_index)


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def observe(state, op, r, seed):
    """y = Hx + eta with eta ~ N(0, r I); ``seed`` is an int or a Generator."""
    if r < 0:
        raise ParameterError("noise variance must be nonnegative")
    y = apply_H(state, op)
    if r > 0:
        y = y + np.sqrt(r) * _as_rng(seed).standard_normal(y.size)
    else:
        y = y.copy()
    return ObservationBatch(y, state.time_index, r)


def percent_observed(op):
    return 100.0 * op.d_y / op.d_x


def _nearest_index(n, offset, stride, n_obs):
    # ties go to the lower observed index
    pos = (np.arange(n) - offset) / stride
    return np.clip(np.ceil(pos - 0.5).astype(int), 0, n_obs - 1)


def nearest_upsample(obs, op):
    """Nearest-neighbour fill of the full grid from thinned values."""
    vals = np.asarray(obs.values, dtype=np.float64)
    if vals.size != op.d_y:
        raise DimensionError(f"expected {op.d_y} observation values, got {vals.size}")
    _, n_lat_obs, n_lon_obs = op.obs_shape
    g = op.geometry
    li = _nearest_index(g.n_lat, op.lat_offset, op.stride, n_lat_obs)
    lo = _nearest_index(g.n_lon, op.lon_offset, op.stride, n_lon_obs)
    full = vals.reshape(op.obs_shape)[:, li][:, :, lo]
    return GridState._trusted(g, np.ascontiguousarray(full), obs.time_index)


def interpolate_baseline(obs, op, kernel, allow_mismatch=False):
    """Nearest-neighbour upsample then one pass of the kernel.

    The kernel side is expected to equal the stride; pass ``allow_mismatch``
    to use any other kernel.
    """
    if kernel.k != op.stride and not allow_mismatch:
        raise ParameterError(f"kernel size {kernel.k} differs from stride {op.stride}")
    return convolve(nearest_upsample(obs, op), kernel)


def batch_to_state(obs, op):
    """Wrap an observation batch on the thinned geometry (for snapshot files)."""
    return GridState(op.obs_geometry(), obs.values, obs.time_index)


def state_to_batch(state, noise_variance):
    return ObservationBatch(state.values.ravel(), state.time_index, noise_variance)


def write_thinning_meta(path, op, noise_variance):
    g = op.geometry
    lines = [
        f"stride={op.stride}",
        f"lat_offset={op.lat_offset}",
        f"lon_offset={op.lon_offset}",
        f"noise_variance={float(noise_variance)!r}",
        f"n_features={g.n_features}",
        f"n_lat={g.n_lat}",
        f"n_lon={g.n_lon}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_thinning_meta(path):
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    required = {"stride", "lat_offset", "lon_offset", "noise_variance"}
    missing = required - meta.keys()
    if missing:
        raise ParameterError(f"{path}: missing keys {sorted(missing)}")
    return {
        "stride": int(meta["stride"]),
        "lat_offset": int(meta["lat_offset"]),
        "lon_offset": int(meta["lon_offset"]),
        "noise_variance": float(meta["noise_variance"]),
    }
