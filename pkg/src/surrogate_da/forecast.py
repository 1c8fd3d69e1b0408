"""Ensemble forecasts from filter analyses, extremum tracking and the
initial-condition comparison protocol.
"""

from __future__ import annotations

import csv
import enum
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, DivergenceError, ParameterError
from .grid import GridState
from .metrics import acc, rmse
from .seeding import stream


@dataclass(frozen=True)
class EnsembleConfig:
    size: int = 50
    perturbation_std: float = 0.3
    horizon: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ParameterError("ensemble size must be >= 1")
        if self.horizon < 1:
            raise ParameterError("forecast horizon must be >= 1")
        if self.perturbation_std < 0:
            raise ParameterError("perturbation_std must be nonnegative")


class InitializationKind(str, enum.Enum):
    INTERPOLATED_OBSERVATIONS = "interpolated_observations"
    TRUTH = "truth"
    ANALYSIS = "analysis"
    CLIMATOLOGY = "climatology"


def make_ensemble(init, cfg, control=False, purpose="ensemble"):
    """``cfg.size`` copies of ``init`` plus independent N(0, s^2 I) noise.

    Member ``i`` draws from its own stream keyed by ``(cfg.seed, purpose, t, i)``;
    with ``control`` member 0 is left unperturbed.
    """
    members = []
    for i in range(cfg.size):
        if (control and i == 0) or cfg.perturbation_std == 0:
            members.append(init)
            continue
        noise = stream(cfg.seed, purpose, init.time_index, i).standard_normal(init.geometry.shape)
        members.append(GridState._trusted(init.geometry, init.values + cfg.perturbation_std * noise, init.time_index))
    return members


def rollout(member, dynamics, h):
    """h free-running steps; no observations are used."""
    if h < 1:
        raise ParameterError("rollout horizon must be >= 1")
    out = []
    x = member
    for step in range(h):
        try:
            x = dynamics.step(x)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), time_index=x.time_index + 1, step_index=step + 1) from exc
        out.append(x)
    return out


def track_minimum(field, region=None, feature=0):
    """Arg-min of one feature over an optional half-open box.

    ``region = (lat_start, lat_stop, lon_start, lon_stop)``; ties resolve to the
    smallest (lat, lon) index pair. Returns ``(lat_index, lon_index, value)``
    in full-grid indices.
    """
    g = field.geometry
    if not 0 <= feature < g.n_features:
        raise DimensionError(f"feature {feature} out of range")
    a0, a1, b0, b1 = region if region is not None else (0, g.n_lat, 0, g.n_lon)
    if not (0 <= a0 < a1 <= g.n_lat and 0 <= b0 < b1 <= g.n_lon):
        raise ParameterError(f"region {region} is empty or outside the {g.n_lat}x{g.n_lon} grid")
    sub = field.values[feature, a0:a1, b0:b1]
    i, j = np.unravel_index(int(np.argmin(sub)), sub.shape)
    return int(a0 + i), int(b0 + j), float(sub[i, j])


def climatology(states):
    """Per-point, per-feature time mean of a run."""
    stack = np.stack([s.values for s in states])
    return GridState(states[0].geometry, stack.mean(axis=0), 0)


class LeadTable(NamedTuple):
    leads: np.ndarray
    mean: np.ndarray
    q05: np.ndarray
    q95: np.ndarray
    band_over: str


def _summarise(scores, band_over):
    scores = np.asarray(scores, dtype=np.float64)
    leads = np.arange(scores.shape[1])
    with np.errstate(all="ignore"):
        mean = np.nanmean(scores, axis=0)
        q05 = np.nanquantile(scores, 0.05, axis=0)
        q95 = np.nanquantile(scores, 0.95, axis=0)
    return LeadTable(leads, mean, q05, q95, band_over)


def _score_rollout(init, dynamics, h, truth_at, weights):
    # row of (rmse, acc) per lead 0..h; NaN after a divergence
    out = np.full((h + 1, 2), np.nan)
    states = [init]
    try:
        states += rollout(init, dynamics, h)
    except DivergenceError:
        pass
    for lead, s in enumerate(states):
        truth = truth_at[init.time_index + lead]
        out[lead, 0] = rmse(s, truth, weights)
        out[lead, 1] = acc(s, truth, weights)
    return out


def _lookup(run):
    if isinstance(run, Mapping):
        return run
    return {s.time_index: s for s in run}


def compare_initializations(truth_run, obs_run, analysis_run, clim, dynamics, h, stride=4, weights=None):
    """Lead-time RMSE/ACC for the four initial-condition kinds.

    Start times are ``1, 1 + stride, ...`` up to ``T - h``; the quantile bands
    are taken over start times. Returns ``{kind: {"rmse": LeadTable, "acc": LeadTable}}``.
    """
    truth_at = _lookup(truth_run)
    obs_at = _lookup(obs_run)
    ana_at = _lookup(analysis_run)
    T = max(truth_at)
    if h < 1 or T - h < 1:
        raise ParameterError(f"horizon {h} leaves no start times in a run of length {T}")
    starts = [t for t in range(1, T - h + 1, stride) if t in obs_at and t in ana_at]
    if not starts:
        raise ParameterError("no common start times across the supplied runs")
    sources = {
        InitializationKind.INTERPOLATED_OBSERVATIONS: lambda t: obs_at[t],
        InitializationKind.TRUTH: lambda t: truth_at[t],
        InitializationKind.ANALYSIS: lambda t: ana_at[t],
        InitializationKind.CLIMATOLOGY: lambda t: clim.with_time(t),
    }
    tables = {}
    for kind, get in sources.items():
        scores = np.stack([_score_rollout(get(t).with_time(t), dynamics, h, truth_at, weights) for t in starts])
        tables[kind] = {
            "rmse": _summarise(scores[:, :, 0], "start_times"),
            "acc": _summarise(scores[:, :, 1], "start_times"),
        }
    return tables


def ensemble_lead_table(members, dynamics, h, truth_run, weights=None):
    """Member-banded (rmse, acc) lead tables for one ensemble."""
    truth_at = _lookup(truth_run)
    scores = np.stack([_score_rollout(m, dynamics, h, truth_at, weights) for m in members])
    return {"rmse": _summarise(scores[:, :, 0], "members"), "acc": _summarise(scores[:, :, 1], "members")}


def ensemble_tracks(members, dynamics, h, feature=0, region=None):
    """Rows ``(member, lead, lat_index, lon_index, value)`` of the tracked minimum."""
    rows = []
    for i, m in enumerate(members):
        states = [m]
        try:
            states += rollout(m, dynamics, h)
        except DivergenceError:
            pass
        for lead, s in enumerate(states):
            rows.append((i, lead, *track_minimum(s, region, feature)))
    return rows


def write_lead_csv(path, tables, metric):
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["init_kind", "lead", "mean", "q05", "q95"])
        for kind in InitializationKind:
            if kind not in tables:
                continue
            t = tables[kind][metric]
            for lead, mu, lo, hi in zip(t.leads, t.mean, t.q05, t.q95):
                writer.writerow([kind.value, int(lead), repr(float(mu)), repr(float(lo)), repr(float(hi))])


def write_track_csv(path, rows):
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["member", "lead", "lat_index", "lon_index", "value"])
        for member, lead, li, lo, value in rows:
            writer.writerow([member, lead, li, lo, repr(float(value))])
