"""Twin-experiment pipeline behind the command-line interface.

Run directory layout::

    config.resolved          effective configuration (all keys)
    snapshots/t{t}.grid      truth x_0 .. x_T
    obs/t{t}.grid            thinned observations (+ obs/thinning.meta)
    analysis/t{t}.grid       surrogate-filter analyses (x_0 included)
    operational/t{t}.grid    true-dynamics filter analyses (optional)
    metrics.csv              per-cycle RMSE / ACC
    stability.txt            bound-verification report
    forecasts/*.csv          lead-time tables and the ensemble track
"""

from __future__ import annotations

import logging
import re
from collections.abc import Mapping
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import dump_config
from .conv import build_kernel
from .covariance import BackgroundCovariance, build_gain
from .dynamics import Advection2DConfig, LinearDynamics, Lorenz96Config, SurrogatePerturbation
from .errors import ParameterError, UndefinedMetricError
from .filter import FilterConfig, FilterTrajectory, operational_filter, ranges_from_truth, run_filter
from .forecast import (
    EnsembleConfig,
    compare_initializations,
    ensemble_lead_table,
    ensemble_tracks,
    make_ensemble,
    write_lead_csv,
    write_track_csv,
)
from .grid import GridGeometry, GridState, default_latitudes, latitude_weights, read_snapshot, write_snapshot
from .metrics import acc, read_metric_csv, rmse, write_metric_csv
from .obs import (
    ThinningOperator,
    batch_to_state,
    interpolate_baseline,
    observe,
    read_thinning_meta,
    state_to_batch,
    write_thinning_meta,
)
from .seeding import stream
from .theory import (
    StabilityEstimate,
    bound_check,
    contraction_estimate,
    defect_estimate,
    format_stability_report,
    noise_scale_estimate,
    scalar_steady_state_error,
)

log = logging.getLogger(__name__)

_SNAP = re.compile(r"^t(\d+)\.grid$")


class SnapshotSeries(Mapping):
    """Lazily read ``t{index}.grid`` files of one run subdirectory."""

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"missing run directory {self.directory}")
        self._times = sorted(
            int(m.group(1)) for p in self.directory.iterdir() if (m := _SNAP.match(p.name))
        )
        self._index = frozenset(self._times)
        self._read = lru_cache(maxsize=64)(self._load)

    def _load(self, t):
        return read_snapshot(self.directory / f"t{t}.grid")

    def __getitem__(self, t):
        if t not in self._index:
            raise KeyError(t)
        return self._read(t)

    def __iter__(self):
        return iter(self._times)

    def __len__(self):
        return len(self._times)

    def __contains__(self, t):
        return t in self._index

    def states(self):
        return [self[t] for t in self._times]


# -- builders ------------------------------------------------------------------


def geometry_for(cfg):
    if cfg.model.kind == "lorenz96":
        return Lorenz96Config(cfg.lorenz96.n).geometry
    if cfg.model.kind == "advection2d":
        a = cfg.advection
        return GridGeometry(a.n_features, a.n_lat, a.n_lon, default_latitudes(a.n_lat))
    return GridGeometry(1, 1, cfg.linear.dim, (0.0,))


def true_dynamics(cfg):
    if cfg.model.kind == "lorenz96":
        c = cfg.lorenz96
        return Lorenz96Config(c.n, c.forcing, c.dt, c.substeps)
    if cfg.model.kind == "advection2d":
        a = cfg.advection
        return Advection2DConfig((a.u, a.v), a.diffusion, a.periodic_lon)
    return LinearDynamics(cfg.linear.a * np.eye(cfg.linear.dim))


def surrogate_dynamics(cfg, base=None):
    base = true_dynamics(cfg) if base is None else base
    s = cfg.surrogate
    bias_field = None
    if s.additive_bias != 0.0:
        bias_field = GridState.full(geometry_for(cfg), s.additive_bias)
    return SurrogatePerturbation(base, s.parameter_bias, bias_field, s.smoothing)


def thinning_operator(cfg, geometry=None):
    geometry = geometry_for(cfg) if geometry is None else geometry
    o = cfg.obs
    return ThinningOperator(o.stride, geometry, o.lat_offset, o.lon_offset)


def covariance_kernel(cfg):
    size = cfg.kernel.size or cfg.obs.stride
    return build_kernel(size, cfg.kernel.sigma2)


def gain_for(cfg, op):
    kernel = covariance_kernel(cfg)
    cov = BackgroundCovariance(kernel, cfg.covariance.q) if cfg.covariance.q > 0 else BackgroundCovariance.default(kernel)
    return build_gain(cov, op, cfg.obs.noise_variance)


def initial_truth(cfg):
    rng = stream(cfg.run.seed, "truth-init")
    geometry = geometry_for(cfg)
    if cfg.model.kind == "lorenz96":
        f = cfg.lorenz96.forcing
        x = f + cfg.truth.init_amplitude * rng.standard_normal(geometry.shape)
    elif cfg.model.kind == "advection2d":
        x = _blob_field(geometry, cfg.advection.blobs, rng)
    else:
        x = rng.standard_normal(geometry.shape)
    return GridState(geometry, x, 0)


def _blob_field(geometry, n_blobs, rng):
    nf, nlat, nlon = geometry.shape
    ii, jj = np.meshgrid(np.arange(nlat), np.arange(nlon), indexing="ij")
    out = np.empty(geometry.shape)
    for f in range(nf):
        field = np.full((nlat, nlon), 5.0 + 0.5 * f)
        for _ in range(n_blobs):
            ci, cj = rng.uniform(0, nlat), rng.uniform(0, nlon)
            width = rng.uniform(0.05, 0.15) * min(nlat, nlon) + 1.0
            amp = rng.uniform(-1.0, 1.0)
            dj = np.minimum(np.abs(jj - cj), nlon - np.abs(jj - cj))
            field += amp * np.exp(-((ii - ci) ** 2 + dj**2) / (2.0 * width**2))
        out[f] = field
    return out


# -- commands ------------------------------------------------------------------


def _write_resolved(cfg, run_dir):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(dump_config(cfg))


def cmd_truth(cfg, run_dir):
    run_dir = Path(run_dir)
    _write_resolved(cfg, run_dir)
    F = true_dynamics(cfg)
    x = initial_truth(cfg)
    for _ in range(cfg.truth.spinup):
        x = F.step(x)
    x = x.with_time(0)
    out = run_dir / "snapshots"
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(out / "t0.grid", x)
    for _ in range(cfg.run.horizon):
        x = F.step(x)
        write_snapshot(out / f"t{x.time_index}.grid", x)
    log.info("wrote %d truth snapshots to %s", cfg.run.horizon + 1, out)
    return 0


def cmd_observe(cfg, run_dir):
    run_dir = Path(run_dir)
    _write_resolved(cfg, run_dir)
    truth = SnapshotSeries(run_dir / "snapshots")
    if 0 not in truth or cfg.run.horizon not in truth:
        raise FileNotFoundError(f"truth snapshots t0..t{cfg.run.horizon} missing under {run_dir / 'snapshots'}")
    op = thinning_operator(cfg, truth[0].geometry)
    out = run_dir / "obs"
    out.mkdir(parents=True, exist_ok=True)
    r = cfg.obs.noise_variance
    for t in range(cfg.run.horizon + 1):
        batch = observe(truth[t], op, r, stream(cfg.run.seed, "obs", t))
        write_snapshot(out / f"t{t}.grid", batch_to_state(batch, op))
    write_thinning_meta(out / "thinning.meta", op, r)
    return 0


def load_observations(run_dir, geometry):
    obs_dir = Path(run_dir) / "obs"
    meta = read_thinning_meta(obs_dir / "thinning.meta")
    op = ThinningOperator(meta["stride"], geometry, meta["lat_offset"], meta["lon_offset"])
    series = SnapshotSeries(obs_dir)
    batches = [state_to_batch(series[t], meta["noise_variance"]) for t in series]
    return op, batches


def _baseline(batch, op, cfg):
    kernel = build_kernel(op.stride, cfg.kernel.sigma2)
    return interpolate_baseline(batch, op, kernel)


def _metric_rows(name, states, truth, weights):
    rows = []
    for s in states:
        ref = truth[s.time_index]
        rows.append((s.time_index, f"{name}_rmse", rmse(s, ref, weights)))
        try:
            rows.append((s.time_index, f"{name}_acc", acc(s, ref, weights)))
        except UndefinedMetricError:
            pass
    return rows


def cmd_assimilate(cfg, run_dir):
    """Surrogate filter (and optionally the operational one) plus baseline metrics.

    Returns 2 when the filter diverged; metrics up to the divergence are kept.
    """
    run_dir = Path(run_dir)
    _write_resolved(cfg, run_dir)
    truth = SnapshotSeries(run_dir / "snapshots")
    geometry = truth[0].geometry
    op, batches = load_observations(run_dir, geometry)
    T = cfg.run.horizon
    if len(batches) < T + 1:
        raise FileNotFoundError(f"need observations t0..t{T}, found {len(batches)}")
    gain = gain_for(cfg, op)
    x0 = _baseline(batches[0], op, cfg)
    F = true_dynamics(cfg)
    fcfg = FilterConfig(surrogate_dynamics(cfg, F), gain, op, x0, T)
    reference = None
    if cfg.run.divergence_check:
        per_time = cfg.run.divergence_reference == "per_time"
        reference = ranges_from_truth((truth[t] for t in range(T + 1)), per_time)
    analysis = run_filter(
        fcfg, batches[1 : T + 1], reference, keep_forecasts=False,
        snapshot_dir=run_dir / "analysis", cadence=cfg.run.cadence,
    )
    weights = latitude_weights(geometry)
    rows = _metric_rows("analysis", analysis.analyses, truth, weights)
    last = analysis.analyses[-1].time_index if analysis.analyses else 0
    rows += _metric_rows("baseline", (_baseline(b, op, cfg) for b in batches[1 : last + 1]), truth, weights)
    if cfg.run.operational:
        oper = operational_filter(
            fcfg, batches[1 : T + 1], F, reference=reference, keep_forecasts=False,
            snapshot_dir=run_dir / "operational", cadence=cfg.run.cadence,
        )
        rows += _metric_rows("operational", oper.analyses, truth, weights)
        if oper.diverged_at is not None:
            rows.append((oper.diverged_at, "operational_diverged_at", float(oper.diverged_at)))
    if analysis.diverged_at is not None:
        rows.append((analysis.diverged_at, "diverged_at", float(analysis.diverged_at)))
    write_metric_csv(run_dir / "metrics.csv", rows)
    if analysis.diverged_at is not None:
        log.error("surrogate filter diverged at t=%d", analysis.diverged_at)
        return 2
    return 0


def cmd_metrics(cfg, run_dir):
    """Recompute metrics.csv from the stored truth, analysis and observations."""
    run_dir = Path(run_dir)
    truth = SnapshotSeries(run_dir / "snapshots")
    geometry = truth[0].geometry
    weights = latitude_weights(geometry)
    rows = []
    ana = SnapshotSeries(run_dir / "analysis")
    rows += _metric_rows("analysis", (ana[t] for t in ana if t > 0), truth, weights)
    op, batches = load_observations(run_dir, geometry)
    last = max(ana)
    rows += _metric_rows("baseline", (_baseline(b, op, cfg) for b in batches[1 : last + 1]), truth, weights)
    if (run_dir / "operational").is_dir():
        oper = SnapshotSeries(run_dir / "operational")
        rows += _metric_rows("operational", (oper[t] for t in oper if t > 0), truth, weights)
    old = run_dir / "metrics.csv"
    if old.exists():
        rows += [r for r in read_metric_csv(old) if r[1] in ("diverged_at", "operational_diverged_at")]
    write_metric_csv(old, rows)
    return 0


class _BaselineSeries(Mapping):
    def __init__(self, batches, op, cfg):
        self._by_t = {b.time_index: b for b in batches}
        self._op, self._cfg = op, cfg

    def __getitem__(self, t):
        return _baseline(self._by_t[t], self._op, self._cfg)

    def __iter__(self):
        return iter(sorted(self._by_t))

    def __len__(self):
        return len(self._by_t)


def _streaming_climatology(truth):
    total = None
    for t in truth:
        v = truth[t].values
        total = v.copy() if total is None else total + v
    return GridState(truth[0].geometry, total / len(truth), 0)


def cmd_forecast(cfg, run_dir):
    run_dir = Path(run_dir)
    truth = SnapshotSeries(run_dir / "snapshots")
    analysis = SnapshotSeries(run_dir / "analysis")
    geometry = truth[0].geometry
    h = cfg.ensemble.horizon
    T = max(truth)
    if h > T - 1:
        raise ParameterError(f"forecast horizon {h} exceeds available truth (T={T})")
    op, batches = load_observations(run_dir, geometry)
    baseline = _BaselineSeries(batches, op, cfg)
    clim = _streaming_climatology(truth)
    model = surrogate_dynamics(cfg)
    weights = latitude_weights(geometry)
    tables = compare_initializations(truth, baseline, analysis, clim, model, h, cfg.ensemble.start_stride, weights)
    out = run_dir / "forecasts"
    out.mkdir(parents=True, exist_ok=True)
    write_lead_csv(out / "rmse.csv", tables, "rmse")
    write_lead_csv(out / "acc.csv", tables, "acc")
    t0 = cfg.ensemble.start_time
    if t0 not in analysis or t0 + h > T:
        raise ParameterError(f"ensemble.start_time={t0} has no analysis or too little truth after it")
    ecfg = EnsembleConfig(cfg.ensemble.size, cfg.ensemble.perturbation_std, h, cfg.run.seed)
    members = make_ensemble(analysis[t0], ecfg, cfg.ensemble.control)
    feature = cfg.ensemble.track_feature
    write_track_csv(out / "track.csv", ensemble_tracks(members, model, h, feature))
    _write_member_table(out / "ensemble_rmse.csv", ensemble_lead_table(members, model, h, truth, weights)["rmse"])
    return 0


def _write_member_table(path, table):
    lines = ["lead,mean,q05,q95,band_over"]
    for lead, mu, lo, hi in zip(table.leads, table.mean, table.q05, table.q95):
        lines.append(f"{int(lead)},{float(mu)!r},{float(lo)!r},{float(hi)!r},{table.band_over}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_verify_theorem(cfg, run_dir):
    run_dir = Path(run_dir)
    truth = SnapshotSeries(run_dir / "snapshots")
    geometry = truth[0].geometry
    op = thinning_operator(cfg, geometry)
    gain = gain_for(cfg, op)
    F = true_dynamics(cfg)
    Fs = surrogate_dynamics(cfg, F)
    th = cfg.theory
    times = list(truth)[:: th.spacing][: th.samples]
    samples = [truth[t] for t in times]
    if th.perturb_std > 0:
        rng = stream(cfg.run.seed, "theory-perturb")
        samples += [s.with_values(s.values + th.perturb_std * rng.standard_normal(geometry.shape)) for s in samples]
    lam = contraction_estimate(F, gain, samples)
    eps = defect_estimate(F, Fs, gain, samples)
    gam = noise_scale_estimate(gain, cfg.obs.noise_variance, th.noise_draws, cfg.run.seed)
    est = StabilityEstimate(lam, eps, gam, len(samples), th.c)
    report = None
    extra = {}
    ana_dir = run_dir / "analysis"
    if ana_dir.is_dir():
        ana = SnapshotSeries(ana_dir)
        run = FilterTrajectory(ana[0], [ana[t] for t in ana if t > 0])
        oper = None
        if (run_dir / "operational").is_dir():
            o = SnapshotSeries(run_dir / "operational")
            oper = FilterTrajectory(o[0], [o[t] for t in o if t > 0])
        if run.analyses:
            report = bound_check(run, truth.states(), est, th.tail_fraction, oper)
    scalar = cfg.model.kind == "linear" and cfg.linear.dim == 1 and cfg.surrogate.parameter_bias == 0.0
    if scalar and report is not None:
        kappa = float(gain.gain_flat(np.ones(1))[0])
        closed = scalar_steady_state_error(
            cfg.linear.a, kappa, cfg.surrogate.additive_bias, np.sqrt(cfg.obs.noise_variance)
        )
        extra["closed_form_error"] = closed
        extra["closed_form_relative_gap"] = abs(report.tail_mean_error - closed) / closed if closed > 0 else 0.0
        extra["closed_form_pass"] = "true" if extra["closed_form_relative_gap"] <= 0.05 else "false"
    (run_dir / "stability.txt").write_text(format_stability_report(est, report, extra))
    return 0
