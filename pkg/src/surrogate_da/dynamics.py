"""One-cycle flow maps.

Every model exposes ``step(state) -> state`` advancing one assimilation cycle
and a ``descriptor`` string. The true dynamics and the surrogate share that
interface, so the filter never needs to know which one it is running.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from . import _accel
from .conv import SMOOTHING_KERNEL, build_kernel, convolve_array
from .errors import DimensionError, DivergenceError, ParameterError
from .grid import GridGeometry, GridState


class DynamicsContract(Protocol):
    descriptor: str

    def step(self, state: GridState) -> GridState: ...


def _finish(geometry, values, time_index, model):
    if not np.isfinite(values).all():
        raise DivergenceError(f"{model} produced non-finite values", time_index=time_index)
    return GridState._trusted(geometry, values, time_index)


# -- Lorenz-96 -----------------------------------------------------------------


@_accel.njit
def _l96_tendency(x, forcing, out):
    n = x.shape[0]
    for i in range(n):
        out[i] = (x[(i + 1) % n] - x[i - 2]) * x[i - 1] - x[i] + forcing


@_accel.njit
def _l96_rk4_numba(x, forcing, dt, substeps):
    n = x.shape[0]
    y = x.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    for _ in range(substeps):
        _l96_tendency(y, forcing, k1)
        for i in range(n):
            tmp[i] = y[i] + 0.5 * dt * k1[i]
        _l96_tendency(tmp, forcing, k2)
        for i in range(n):
            tmp[i] = y[i] + 0.5 * dt * k2[i]
        _l96_tendency(tmp, forcing, k3)
        for i in range(n):
            tmp[i] = y[i] + dt * k3[i]
        _l96_tendency(tmp, forcing, k4)
        for i in range(n):
            y[i] = y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return y


def _l96_tendency_numpy(x, forcing):
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def _l96_rk4_numpy(x, forcing, dt, substeps):
    y = x.copy()
    for _ in range(substeps):
        k1 = _l96_tendency_numpy(y, forcing)
        k2 = _l96_tendency_numpy(y + 0.5 * dt * k1, forcing)
        k3 = _l96_tendency_numpy(y + 0.5 * dt * k2, forcing)
        k4 = _l96_tendency_numpy(y + dt * k3, forcing)
        y = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


@dataclass(frozen=True)
class Lorenz96Config:
    """Lorenz-96 on a ``1 x 1 x n`` grid, integrated with classical RK4."""

    n: int = 40
    forcing: float = 8.0
    dt: float = 0.05
    substeps: int = 1
    backend: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.n < 4:
            raise ParameterError(f"Lorenz-96 needs n >= 4, got {self.n}")
        if not self.dt > 0:
            raise ParameterError("dt must be positive")
        if self.substeps < 1:
            raise ParameterError("substeps must be >= 1")

    @property
    def descriptor(self):
        return f"lorenz96(n={self.n}, forcing={self.forcing!r}, dt={self.dt!r}, substeps={self.substeps})"

    @property
    def geometry(self):
        return GridGeometry(1, 1, self.n, (0.0,))

    def perturbed(self, bias):
        return replace(self, forcing=self.forcing + bias)

    def initial_state(self, rng, amplitude=0.01):
        x = self.forcing + amplitude * rng.standard_normal(self.n)
        return GridState(self.geometry, x, 0)

    def step(self, state):
        if state.geometry.shape != (1, 1, self.n):
            raise DimensionError(f"Lorenz-96 expects a 1x1x{self.n} grid, got {state.geometry.shape}")
        rk4 = _accel.select(_l96_rk4_numba, _l96_rk4_numpy, self.backend)
        out = rk4(np.ascontiguousarray(state.values.ravel()), float(self.forcing), float(self.dt), int(self.substeps))
        return _finish(state.geometry, out.reshape(state.geometry.shape), state.time_index + 1, "lorenz96")


def lorenz96_step(cfg, state):
    return cfg.step(state)


# -- 2D advection-diffusion ----------------------------------------------------


@_accel.njit
def _shift_numba(x, u, v, periodic_lon):
    nb, nlat, nlon = x.shape
    # departure point of (i, j) is (i - v, j - u)
    fu = np.floor(-u)
    fv = np.floor(-v)
    au = -u - fu
    av = -v - fv
    du = int(fu)
    dv = int(fv)
    out = np.empty_like(x)
    for b in range(nb):
        for i in range(nlat):
            i0 = i + dv
            i1 = i0 + 1
            i0 = min(max(i0, 0), nlat - 1)
            i1 = min(max(i1, 0), nlat - 1)
            for j in range(nlon):
                j0 = j + du
                j1 = j0 + 1
                if periodic_lon:
                    j0 = j0 % nlon
                    j1 = j1 % nlon
                else:
                    j0 = min(max(j0, 0), nlon - 1)
                    j1 = min(max(j1, 0), nlon - 1)
                top = (1.0 - au) * x[b, i0, j0] + au * x[b, i0, j1]
                bot = (1.0 - au) * x[b, i1, j0] + au * x[b, i1, j1]
                out[b, i, j] = (1.0 - av) * top + av * bot
    return out


def _shift_numpy(x, u, v, periodic_lon):
    _, nlat, nlon = x.shape
    fu, fv = np.floor(-u), np.floor(-v)
    au, av = -u - fu, -v - fv
    j0 = np.arange(nlon) + int(fu)
    i0 = np.arange(nlat) + int(fv)
    if periodic_lon:
        jj0, jj1 = j0 % nlon, (j0 + 1) % nlon
    else:
        jj0, jj1 = np.clip(j0, 0, nlon - 1), np.clip(j0 + 1, 0, nlon - 1)
    ii0, ii1 = np.clip(i0, 0, nlat - 1), np.clip(i0 + 1, 0, nlat - 1)
    lon = (1.0 - au) * x[:, :, jj0] + au * x[:, :, jj1]
    return (1.0 - av) * lon[:, ii0] + av * lon[:, ii1]


DIFFUSION_KERNEL = build_kernel(3, 1.0)


@dataclass(frozen=True)
class Advection2DConfig:
    """Semi-Lagrangian advection by a uniform velocity plus kernel diffusion.

    ``velocity = (u, v)`` is in grid cells per cycle; ``u`` moves the field
    toward increasing longitude index, ``v`` toward increasing latitude index
    (southward). Diffusion blends in one convolution pass:
    ``x + diffusion * (conv(x) - x)``.
    """

    velocity: tuple[float, float] = (0.5, 0.0)
    diffusion: float = 0.0
    periodic_lon: bool = True
    backend: str | None = field(default=None, compare=False)

    def __post_init__(self):
        u, v = (float(c) for c in self.velocity)
        object.__setattr__(self, "velocity", (u, v))
        if abs(u) > 1.0 or abs(v) > 1.0:
            raise ParameterError(f"CFL violation: |u|, |v| must be <= 1 cell per cycle, got ({u}, {v})")
        if not 0.0 <= self.diffusion <= 1.0:
            raise ParameterError("diffusion must lie in [0, 1]")

    @property
    def descriptor(self):
        u, v = self.velocity
        return f"advection2d(u={u!r}, v={v!r}, diffusion={self.diffusion!r}, periodic_lon={self.periodic_lon})"

    def perturbed(self, bias):
        u, v = self.velocity
        return replace(self, velocity=(u + bias, v))

    def step(self, state):
        u, v = self.velocity
        x = state.values
        if u != 0.0 or v != 0.0:
            shift = _accel.select(_shift_numba, _shift_numpy, self.backend)
            x = shift(np.ascontiguousarray(x), u, v, bool(self.periodic_lon))
        if self.diffusion > 0.0:
            blurred = convolve_array(x, DIFFUSION_KERNEL.weights, self.periodic_lon, self.backend)
            x = x + self.diffusion * (blurred - x)
        else:
            x = np.array(x)
        return _finish(state.geometry, x, state.time_index + 1, "advection2d")


def advection2d_step(cfg, state):
    return cfg.step(state)


# -- linear maps (closed-form oracles) -----------------------------------------


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    """x -> A x on the flat state vector."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        if a.shape[0] != a.shape[1]:
            raise DimensionError("linear dynamics need a square matrix")
        a.flags.writeable = False
        object.__setattr__(self, "matrix", a)

    @classmethod
    def scalar(cls, a):
        return cls(np.array([[float(a)]]))

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    @property
    def descriptor(self):
        return f"linear(dim={self.matrix.shape[0]})"

    def perturbed(self, bias):
        return LinearDynamics(self.matrix + bias * np.eye(self.matrix.shape[0]))

    def step(self, state):
        flat = state.values.ravel()
        if flat.size != self.matrix.shape[0]:
            raise DimensionError(f"state size {flat.size} does not match matrix {self.matrix.shape}")
        out = (self.matrix @ flat).reshape(state.geometry.shape)
        return _finish(state.geometry, out, state.time_index + 1, "linear")


# -- surrogate -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SurrogatePerturbation:
    """F_s = S o F~ where F~ is the base model with biased parameters.

    ``additive_bias_field`` is added after the biased step and before
    smoothing. ``smoothing_kernel`` defaults to the 4x4, sigma^2 = 8 kernel.
    """

    base: object
    parameter_bias: float = 0.0
    additive_bias_field: GridState | None = None
    apply_smoothing: bool = False
    smoothing_kernel: object = None
    smoothing_periodic_lon: bool = False

    def __post_init__(self):
        biased = self.base.perturbed(self.parameter_bias) if self.parameter_bias != 0.0 else self.base
        object.__setattr__(self, "_biased", biased)
        if self.smoothing_kernel is None:
            object.__setattr__(self, "smoothing_kernel", SMOOTHING_KERNEL)

    @property
    def descriptor(self):
        parts = [f"base={self.base.descriptor}", f"parameter_bias={self.parameter_bias!r}"]
        if self.additive_bias_field is not None:
            parts.append("additive_bias_field=yes")
        parts.append(f"smoothing={self.apply_smoothing}")
        return "surrogate(" + ", ".join(parts) + ")"

    def step(self, state):
        out = self._biased.step(state)
        if self.additive_bias_field is None and not self.apply_smoothing:
            return out
        x = out.values
        if self.additive_bias_field is not None:
            if self.additive_bias_field.geometry != state.geometry:
                raise DimensionError("additive bias field geometry does not match the state")
            x = x + self.additive_bias_field.values
        if self.apply_smoothing:
            x = convolve_array(x, self.smoothing_kernel.weights, self.smoothing_periodic_lon)
        return _finish(state.geometry, x, out.time_index, "surrogate")


def surrogate_step(pert, state):
    return pert.step(state)
