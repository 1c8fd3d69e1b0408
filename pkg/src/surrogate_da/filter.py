"""The 3DVar recursion with surrogate or true dynamics, and divergence detection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DimensionError, DivergenceError, ParameterError, SequencingError
from .grid import GridState, write_snapshot
from .obs import apply_H

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterConfig:
    dynamics: object
    gain: object
    op: object
    initial_state: GridState
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ParameterError("horizon must be >= 1")
        if self.initial_state.geometry != self.op.geometry:
            raise DimensionError("initial state geometry does not match the observation operator")
        if self.gain.op.geometry != self.op.geometry:
            raise DimensionError("gain was built for a different grid")


@dataclass
class FilterTrajectory:
    """Analyses for t = 1..len(analyses); ``initial`` is x_0."""

    initial: GridState
    analyses: list = field(default_factory=list)
    forecasts: Optional[list] = None
    diverged_at: Optional[int] = None

    def states(self):
        """x_0 followed by all analyses."""
        return [self.initial, *self.analyses]


def assimilate_step(cfg, x_prev, y):
    """Forecast with the configured dynamics, then correct with ``y``.

    Returns ``(forecast, analysis)``.
    """
    if y.time_index != x_prev.time_index + 1:
        raise SequencingError(
            f"observation at t={y.time_index} cannot follow a state at t={x_prev.time_index}"
        )
    forecast = cfg.dynamics.step(x_prev)
    innovation = y.values - apply_H(forecast, cfg.op)
    increment = cfg.gain.gain_array(innovation)
    values = forecast.values + increment
    if not np.isfinite(values).all():
        raise DivergenceError("analysis became non-finite", time_index=y.time_index)
    return forecast, GridState._trusted(forecast.geometry, values, forecast.time_index)


class DivergenceMask(NamedTuple):
    mask: np.ndarray
    flag: bool


def divergence_detect(state, reference_min, reference_max):
    """Flag values more than 10% beyond the reference extremes (strictly)."""
    nf = state.geometry.n_features
    lo = np.broadcast_to(np.asarray(reference_min, dtype=np.float64), (nf,))
    hi = np.broadcast_to(np.asarray(reference_max, dtype=np.float64), (nf,))
    if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
        raise ParameterError("reference range must be finite")
    lower = (lo - 0.1 * np.abs(lo))[:, None, None]
    upper = (hi + 0.1 * np.abs(hi))[:, None, None]
    vals = state.values
    mask = (vals < lower) | (vals > upper) | ~np.isfinite(vals)
    return DivergenceMask(mask, bool(mask.any()))


def ranges_from_truth(truth, per_time=True):
    """Reference ranges for :func:`divergence_detect` from a truth run.

    ``per_time`` uses the per-feature extremes of the truth state at the same
    time index; otherwise the extremes over the whole run are used for every t,
    which suits low-dimensional states whose per-time extremes are noisy.
    """
    by_time = {s.time_index: s for s in truth}
    if not per_time:
        stack = np.stack([s.values for s in by_time.values()])
        mins, maxs = stack.min(axis=(0, 2, 3)), stack.max(axis=(0, 2, 3))
        return lambda t: (mins, maxs)

    def reference(t):
        v = by_time[t].values
        return v.min(axis=(1, 2)), v.max(axis=(1, 2))

    return reference


def run_filter(
    cfg,
    observations: Sequence,
    reference: Optional[Callable[[int], tuple]] = None,
    keep_forecasts: bool = True,
    snapshot_dir=None,
    cadence: int = 1,
):
    """Iterate the analysis cycle over ``observations`` (time indices 1..T).

    Stops at the first divergence (non-finite dynamics, or a reference-range
    violation when ``reference`` is given) and records ``diverged_at``; the
    diverged analysis itself is not kept.
    """
    traj = FilterTrajectory(cfg.initial_state, [], [] if keep_forecasts else None)
    if snapshot_dir is not None:
        snapshot_dir = Path(snapshot_dir)
        snapshot_dir.mkdir(parents=True, exist_ok=True)
        write_snapshot(snapshot_dir / f"t{cfg.initial_state.time_index}.grid", cfg.initial_state)
    x = cfg.initial_state
    for step in range(cfg.horizon):
        t = cfg.initial_state.time_index + step + 1
        if step >= len(observations):
            raise SequencingError(f"observation stream ends before t={t}")
        y = observations[step]
        if y.time_index != t:
            raise SequencingError(f"expected observation for t={t}, got t={y.time_index}")
        try:
            forecast, x_next = assimilate_step(cfg, x, y)
        except DivergenceError as exc:
            log.warning("filter diverged at t=%d: %s", t, exc)
            traj.diverged_at = t
            break
        if reference is not None:
            mins, maxs = reference(t)
            if divergence_detect(x_next, mins, maxs).flag:
                log.warning("analysis at t=%d left the reference range", t)
                traj.diverged_at = t
                break
        x = x_next
        traj.analyses.append(x)
        if keep_forecasts:
            traj.forecasts.append(forecast)
        if snapshot_dir is not None and t % cadence == 0:
            write_snapshot(snapshot_dir / f"t{t}.grid", x)
    return traj


def operational_filter(cfg, observations, true_dynamics, **kwargs):
    """The same recursion driven by the true dynamics, sharing x_0."""
    return run_filter(replace(cfg, dynamics=true_dynamics), observations, **kwargs)
