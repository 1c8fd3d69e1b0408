"""Gridded multi-feature states, latitude geometry and the snapshot file format.

Values are stored as a float64 array of shape ``(n_features, n_lat, n_lon)``,
i.e. feature-major with latitude rows outer and longitude inner. The flat
``ravel()`` of that array is the state vector used by every linear operator
in the package.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DivergenceError, ParameterError

SNAPSHOT_MAGIC = b"GASM"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")


@dataclass(frozen=True)
class GridGeometry:
    n_features: int
    n_lat: int
    n_lon: int
    lat_values: tuple[float, ...] = field(default=())

    def __post_init__(self):
        for name in ("n_features", "n_lat", "n_lon"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        lats = tuple(float(v) for v in self.lat_values)
        if not lats:
            lats = default_latitudes(self.n_lat)
        if len(lats) != self.n_lat:
            raise DimensionError(f"expected {self.n_lat} latitudes, got {len(lats)}")
        arr = np.asarray(lats)
        if not np.all(np.isfinite(arr)) or np.any(np.abs(arr) > 90.0):
            raise ParameterError("latitudes must lie in [-90, 90]")
        if self.n_lat > 1 and not np.all(np.diff(arr) < 0):
            raise ParameterError("latitudes must be strictly decreasing (north to south)")
        object.__setattr__(self, "lat_values", lats)

    @property
    def shape(self):
        return (self.n_features, self.n_lat, self.n_lon)

    @property
    def size(self):
        return self.n_features * self.n_lat * self.n_lon

    def with_features(self, n_features):
        return GridGeometry(n_features, self.n_lat, self.n_lon, self.lat_values)


def default_latitudes(n_lat):
    """Cell-centred latitudes from north to south on a regular grid.

    A single row sits on the equator, so 1-row grids (e.g. Lorenz-96 states)
    carry unit latitude weights.
    """
    if n_lat == 1:
        return (0.0,)
    dlat = 180.0 / n_lat
    return tuple(90.0 - dlat * (j + 0.5) for j in range(n_lat))


def equatorial_geometry(n_features, n_lat, n_lon):
    """Geometry whose rows are spread inside +-1e-6 degrees of the equator.

    Weights are 1 up to round-off; used where a test wants unweighted metrics
    on a grid with several latitude rows.
    """
    if n_lat == 1:
        lats = (0.0,)
    else:
        lats = tuple(np.linspace(1e-6, -1e-6, n_lat))
    return GridGeometry(n_features, n_lat, n_lon, lats)


@dataclass(frozen=True, eq=False)
class GridState:
    geometry: GridGeometry
    values: np.ndarray
    time_index: int = 0
    diverged: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.size != self.geometry.size:
            raise DimensionError(
                f"values have {vals.size} entries, geometry {self.geometry.shape} needs {self.geometry.size}"
            )
        vals = vals.reshape(self.geometry.shape)
        if vals is self.values or np.shares_memory(vals, self.values):
            vals = vals.copy()
        vals.flags.writeable = False
        if int(self.time_index) < 0:
            raise ParameterError("time_index must be nonnegative")
        if not self.diverged and not np.isfinite(vals).all():
            raise DivergenceError("state contains non-finite values", time_index=self.time_index)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "time_index", int(self.time_index))

    @classmethod
    def _trusted(cls, geometry, values, time_index, diverged=False):
        # internal fast path: ``values`` is freshly allocated and correctly shaped
        obj = object.__new__(cls)
        values.flags.writeable = False
        object.__setattr__(obj, "geometry", geometry)
        object.__setattr__(obj, "values", values)
        object.__setattr__(obj, "time_index", int(time_index))
        object.__setattr__(obj, "diverged", diverged)
        return obj

    @classmethod
    def zeros(cls, geometry, time_index=0):
        return cls._trusted(geometry, np.zeros(geometry.shape), time_index)

    @classmethod
    def full(cls, geometry, value, time_index=0):
        return cls._trusted(geometry, np.full(geometry.shape, float(value)), time_index)

    def with_values(self, values, time_index=None):
        """New state on the same geometry; validates finiteness."""
        t = self.time_index if time_index is None else time_index
        return GridState(self.geometry, values, t)

    def with_time(self, time_index):
        return GridState._trusted(self.geometry, self.values, time_index, self.diverged)

    def flat(self):
        return self.values.ravel()

    def __eq__(self, other):
        if not isinstance(other, GridState):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.time_index == other.time_index
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    __hash__ = None


def require_same_geometry(a, b):
    if a.geometry != b.geometry:
        raise DimensionError(f"geometry mismatch: {a.geometry.shape} vs {b.geometry.shape}")


@dataclass(frozen=True)
class FeatureStats:
    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self):
        means = tuple(float(m) for m in self.means)
        stds = tuple(float(s) for s in self.stds)
        if len(means) != len(stds):
            raise DimensionError("means and stds differ in length")
        if any(not s > 0 for s in stds):
            raise ParameterError("feature standard deviations must be strictly positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    @classmethod
    def from_states(cls, states):
        """Global per-feature mean and standard deviation over a run."""
        stack = np.stack([s.values for s in states])
        means = stack.mean(axis=(0, 2, 3))
        stds = stack.std(axis=(0, 2, 3))
        stds = np.where(stds > 0, stds, 1.0)
        return cls(tuple(means), tuple(stds))


def _stats_arrays(state, stats):
    if len(stats.means) != state.geometry.n_features:
        raise DimensionError(
            f"stats cover {len(stats.means)} features, state has {state.geometry.n_features}"
        )
    mu = np.asarray(stats.means)[:, None, None]
    sd = np.asarray(stats.stds)[:, None, None]
    return mu, sd


def standardize(state, stats):
    mu, sd = _stats_arrays(state, stats)
    return GridState._trusted(state.geometry, (state.values - mu) / sd, state.time_index)


def destandardize(state, stats):
    mu, sd = _stats_arrays(state, stats)
    return GridState._trusted(state.geometry, state.values * sd + mu, state.time_index)


def latitude_weights(geometry):
    """cos(lat) normalised to unit mean over latitude rows.

    Raises ParameterError when every row sits on a pole (the mean is zero).
    """
    cos = np.cos(np.deg2rad(np.asarray(geometry.lat_values)))
    # cos(90 deg) is ~6e-17 in floating point; poles get weight exactly 0
    cos[np.isclose(np.abs(np.asarray(geometry.lat_values)), 90.0, rtol=0, atol=1e-12)] = 0.0
    mean = cos.mean()
    if mean <= 0:
        raise ParameterError("latitude weights undefined: all rows lie on a pole")
    return cos / mean


def derived_wind_speed(state, u_feature, v_feature):
    """Pointwise sqrt(u^2 + v^2) as a single-feature state."""
    nf = state.geometry.n_features
    for idx in (u_feature, v_feature):
        if not 0 <= idx < nf:
            raise DimensionError(f"feature index {idx} out of range for {nf} features")
    speed = np.hypot(state.values[u_feature], state.values[v_feature])[None]
    return GridState._trusted(state.geometry.with_features(1), speed, state.time_index)


def state_blend(a, b, alpha):
    """a + alpha * (b - a)."""
    require_same_geometry(a, b)
    return GridState._trusted(a.geometry, a.values + alpha * (b.values - a.values), a.time_index)


def write_snapshot(path, state):
    g = state.geometry
    header = _HEADER.pack(
        SNAPSHOT_MAGIC, SNAPSHOT_VERSION, g.n_features, g.n_lat, g.n_lon, state.time_index
    )
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(g.lat_values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.values, dtype="<f8").tobytes())


def read_snapshot(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DimensionError(f"{path}: truncated snapshot header")
    magic, version, nf, nlat, nlon, t = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise DimensionError(f"{path}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise DimensionError(f"{path}: unsupported snapshot version {version}")
    off = _HEADER.size
    expected = off + 8 * (nlat + nf * nlat * nlon)
    if len(data) != expected:
        raise DimensionError(f"{path}: expected {expected} bytes, found {len(data)}")
    lats = np.frombuffer(data, dtype="<f8", count=nlat, offset=off)
    vals = np.frombuffer(data, dtype="<f8", count=nf * nlat * nlon, offset=off + 8 * nlat)
    geometry = GridGeometry(nf, nlat, nlon, tuple(lats))
    vals = vals.astype(np.float64).reshape(geometry.shape)
    return GridState._trusted(geometry, vals, t, diverged=not np.isfinite(vals).all())
