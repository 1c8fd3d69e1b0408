"""Latitude-weighted RMSE and ACC, and the CRPS of an empirical ensemble."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParameterError, UndefinedMetricError
from .grid import latitude_weights, require_same_geometry


@dataclass(frozen=True)
class MetricSeries:
    times: tuple
    values: tuple
    metric_name: str

    def __post_init__(self):
        if len(self.times) != len(self.values):
            raise DimensionError("times and values differ in length")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("metric values must be finite")


def _weights(estimate, weights):
    if weights is None:
        weights = latitude_weights(estimate.geometry)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (estimate.geometry.n_lat,):
        raise DimensionError(f"expected {estimate.geometry.n_lat} latitude weights, got {w.shape}")
    return w[None, :, None]


def rmse(estimate, truth, weights=None):
    """Mean over features of the per-feature latitude-weighted RMSE."""
    require_same_geometry(estimate, truth)
    w = _weights(estimate, weights)
    sq = w * (estimate.values - truth.values) ** 2
    return float(np.mean(np.sqrt(sq.mean(axis=(1, 2)))))


def acc(estimate, truth, weights=None, symmetric=False):
    """Latitude-weighted anomaly correlation, averaged over features.

    By default the denominator weights only the truth term, as the metric is
    usually printed; ``symmetric=True`` weights both terms.
    """
    require_same_geometry(estimate, truth)
    w = _weights(estimate, weights)
    est, tru = estimate.values, truth.values
    num = (w * est * tru).sum(axis=(1, 2))
    est_sq = ((w if symmetric else 1.0) * est**2).sum(axis=(1, 2))
    tru_sq = (w * tru**2).sum(axis=(1, 2))
    if np.any(tru_sq == 0):
        raise UndefinedMetricError("ACC undefined: a truth feature has zero (weighted) norm")
    if np.any(est_sq == 0):
        raise UndefinedMetricError("ACC undefined: an estimate feature has zero norm")
    return float(np.mean(num / (np.sqrt(est_sq) * np.sqrt(tru_sq))))


def crps(ensemble, observation):
    """CRPS of the empirical CDF of ``ensemble`` against a scalar observation.

    Uses mean|x_i - y| - (1 / 2M^2) sum_ij |x_i - x_j|, with the pair sum
    evaluated in O(M log M) on the sorted sample.
    """
    x = np.sort(np.asarray(ensemble, dtype=np.float64).ravel())
    m = x.size
    if m == 0:
        raise ParameterError("CRPS needs at least one ensemble member")
    skill = np.mean(np.abs(x - observation))
    # sum_{i<j} (x_j - x_i) = sum_i x_i (2i - m + 1) for 0-based sorted i
    pair_sum = 2.0 * np.dot(x, 2.0 * np.arange(m) - m + 1.0)
    return float(skill - pair_sum / (2.0 * m * m))


def trajectory_crps(ensembles, track, metric_name="track_crps"):
    """Per-time CRPS of 2D point ensembles, averaged over the two coordinates.

    ``ensembles[t]`` has shape ``(M, 2)``; ``track[t]`` is a length-2 point.
    """
    if len(ensembles) != len(track):
        raise DimensionError(f"{len(ensembles)} ensemble times vs {len(track)} track times")
    values = []
    for members, point in zip(ensembles, track):
        members = np.asarray(members, dtype=np.float64)
        point = np.asarray(point, dtype=np.float64)
        if members.ndim != 2 or members.shape[1] != point.size:
            raise DimensionError("ensemble members and track points differ in dimension")
        values.append(np.mean([crps(members[:, c], point[c]) for c in range(point.size)]))
    return MetricSeries(tuple(range(len(values))), tuple(values), metric_name)


def write_metric_csv(path, rows):
    """Write ``(time_index, metric_name, value)`` rows sorted by time then name."""
    rows = sorted(rows, key=lambda r: (int(r[0]), r[1]))
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time_index", "metric_name", "value"])
        for t, name, value in rows:
            writer.writerow([int(t), name, repr(float(value))])


def read_metric_csv(path):
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["time_index"]), r["metric_name"], float(r["value"])) for r in reader]
