"""Numerical witnesses for the long-time accuracy bound of surrogate 3DVar.

The bound reads ``limsup E||x^s_t - x^true_t|| <= c (gamma + eps) / (1 - lam)``
with

* ``lam`` the sup of ``||(I - KH) DF(x)||_2`` (contraction of the analysis map),
* ``eps`` the sup of ``||(I - KH)(F_s(x) - F(x))||_2`` (unobserved model defect),
* ``gamma`` the observation-noise scale, estimated here as ``E||K eta||``.

Sups over all of state space are not computable; the estimators below take the
sup over supplied samples (attractor states, optionally perturbed), so they
are empirical lower bounds of the true constants.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CapacityError, DimensionError, ParameterError
from .grid import GridState

JACOBIAN_LIMIT = 4096
POWER_ITERS = 200
POWER_RTOL = 1e-6


class ConvergenceWarning(UserWarning):
    pass


def default_step(x):
    return 1e-5 * (1.0 + float(np.max(np.abs(x.values))))


def jvp(dynamics, x, v, h=None):
    """Central-difference Jacobian-vector product DF(x) v."""
    if h is None:
        h = default_step(x)
    if not h > 0:
        raise ParameterError("finite-difference step must be positive")
    vv = np.asarray(v.values if isinstance(v, GridState) else v, dtype=np.float64).reshape(x.geometry.shape)
    if not np.any(vv):
        return GridState._trusted(x.geometry, np.zeros(x.geometry.shape), x.time_index)
    plus = dynamics.step(GridState._trusted(x.geometry, x.values + h * vv, x.time_index))
    minus = dynamics.step(GridState._trusted(x.geometry, x.values - h * vv, x.time_index))
    return GridState._trusted(x.geometry, (plus.values - minus.values) / (2.0 * h), x.time_index)


def jacobian_fd(dynamics, x, h=None):
    """Dense Jacobian assembled from one jvp per coordinate direction."""
    d = x.geometry.size
    if d > JACOBIAN_LIMIT:
        raise CapacityError(f"dense Jacobian limited to {JACOBIAN_LIMIT} dimensions, state has {d}")
    if h is None:
        h = default_step(x)
    cols = np.empty((d, d))
    e = np.zeros(d)
    for i in range(d):
        e[i] = 1.0
        cols[:, i] = jvp(dynamics, x, e, h).values.ravel()
        e[i] = 0.0
    return cols


@dataclass(frozen=True, eq=False)
class DenseGain:
    """Explicit K and H matrices with the projector interface of GainApplicator."""

    K: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        H = np.asarray(self.H, dtype=np.float64)
        if K.shape != (H.shape[1], H.shape[0]):
            raise DimensionError(f"K {K.shape} incompatible with H {H.shape}")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "H", H)

    @classmethod
    def from_covariance(cls, C, H, R):
        C, H, R = (np.asarray(m, dtype=np.float64) for m in (C, H, R))
        return cls(C @ H.T @ np.linalg.inv(H @ C @ H.T + R), H)

    def observe(self, w):
        return self.H @ np.asarray(w).ravel()

    def gain_flat(self, innovation):
        return self.K @ np.asarray(innovation).ravel()

    def project(self, w):
        w = np.asarray(w).ravel()
        return w - self.K @ (self.H @ w)

    def project_adjoint(self, w):
        w = np.asarray(w).ravel()
        return w - self.H.T @ (self.K.T @ w)


def power_iteration(apply, apply_t, dim, iters=POWER_ITERS, rtol=POWER_RTOL, rng=None):
    """Largest singular value of a matrix-free operator via its Gram operator.

    Returns ``(sigma, converged)``; ``sigma`` is the best Rayleigh quotient
    seen, so a non-converged run still reports a valid lower bound.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    best = 0.0
    prev = None
    for _ in range(iters):
        mv = apply(v)
        rq = float(mv @ mv)
        best = max(best, rq)
        g = apply_t(mv)
        norm = np.linalg.norm(g)
        if norm == 0.0:
            return math.sqrt(best), True
        v = g / norm
        if prev is not None and abs(rq - prev) <= rtol * max(rq, 1e-300):
            return math.sqrt(best), True
        prev = rq
    return math.sqrt(best), False


def contraction_estimate(dynamics, gain, samples, iters=POWER_ITERS, rtol=POWER_RTOL, h=None, seed=0):
    """Sample sup of ||(I - KH) DF(x)||_2."""
    if len(samples) == 0:
        raise ParameterError("contraction_estimate needs at least one sample")
    rng = np.random.default_rng(seed)
    lam = 0.0
    for x in samples:
        J = jacobian_fd(dynamics, x, h)
        sigma, ok = power_iteration(
            lambda v: gain.project(J @ v),
            lambda w: J.T @ gain.project_adjoint(w),
            J.shape[0],
            iters,
            rtol,
            rng,
        )
        if not ok:
            warnings.warn(
                f"power iteration did not reach rtol={rtol} in {iters} iterations; best estimate {sigma:.6g}",
                ConvergenceWarning,
                stacklevel=2,
            )
        lam = max(lam, sigma)
    return lam


def defect_estimate(true_dynamics, surrogate, gain, samples):
    """Sample sup of ||(I - KH)(F_s(x) - F(x))||_2."""
    if len(samples) == 0:
        raise ParameterError("defect_estimate needs at least one sample")
    eps = 0.0
    for x in samples:
        diff = surrogate.step(x).values.ravel() - true_dynamics.step(x).values.ravel()
        eps = max(eps, float(np.linalg.norm(gain.project(diff))))
    return eps


def noise_scale_estimate(gain, r, draws=200, seed=0):
    """Monte Carlo E||K eta|| with eta ~ N(0, r I)."""
    if r < 0:
        raise ParameterError("noise variance must be nonnegative")
    if r == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    d_y = gain.H.shape[0] if isinstance(gain, DenseGain) else gain.op.d_y
    total = 0.0
    for _ in range(draws):
        eta = math.sqrt(r) * rng.standard_normal(d_y)
        total += float(np.linalg.norm(gain.gain_flat(eta)))
    return total / draws


def sample_attractor(dynamics, x0, count, spacing=5, spinup=500, perturb_std=0.0, seed=0):
    """States along a trajectory after spin-up, optionally jittered.

    With ``perturb_std > 0`` every sample is followed by a perturbed copy, so
    ``2 * count`` states are returned.
    """
    rng = np.random.default_rng(seed)
    x = x0
    for _ in range(spinup):
        x = dynamics.step(x)
    out = []
    for _ in range(count):
        for _ in range(spacing):
            x = dynamics.step(x)
        out.append(x)
        if perturb_std > 0:
            out.append(x.with_values(x.values + perturb_std * rng.standard_normal(x.geometry.shape)))
    return out


@dataclass(frozen=True)
class StabilityEstimate:
    lambda_hat: float
    epsilon_hat: float
    gamma_hat: float
    sample_count: int
    c: float = 1.0

    def __post_init__(self):
        if self.lambda_hat < 0:
            raise ParameterError("lambda_hat must be nonnegative")

    @property
    def applicable(self):
        return self.lambda_hat < 1.0

    @property
    def bound(self):
        if not self.applicable:
            return math.inf
        return self.c * (self.gamma_hat + self.epsilon_hat) / (1.0 - self.lambda_hat)

    @property
    def gap_bound(self):
        """epsilon / (1 - lambda): limit of ||x^s - x^o||."""
        if not self.applicable:
            return math.inf
        return self.epsilon_hat / (1.0 - self.lambda_hat)


@dataclass(frozen=True)
class BoundReport:
    applicable: bool
    tail_mean_error: float
    bound: float
    ratio: float
    tail_start: int
    tail_length: int
    operational_error: Optional[float] = None
    surrogate_gap: Optional[float] = None
    gap_bound: Optional[float] = None


def _tail(seq, tail_fraction):
    n = len(seq)
    start = n - max(1, int(round(tail_fraction * n)))
    return start, seq[start:]


def _by_time(states):
    return {s.time_index: s for s in states}


def _mean_distance(a_states, b_lookup):
    return float(np.mean([np.linalg.norm(a.values - b_lookup[a.time_index].values) for a in a_states]))


def bound_check(run, truth, est, tail_fraction=0.5, operational=None):
    """Compare the tail-mean filter error against (gamma + eps) / (1 - lambda).

    ``c`` is not known a priori, so the report states the ratio rather than a
    verdict. With ``operational`` supplied the error is split into
    ||x^o - x^true|| and ||x^s - x^o||.
    """
    if not 0.0 < tail_fraction < 1.0:
        raise ParameterError("tail_fraction must lie in (0, 1)")
    if not run.analyses:
        raise ParameterError("filter run has no analyses")
    truth_at = _by_time(truth)
    start, tail = _tail(run.analyses, tail_fraction)
    err = _mean_distance(tail, truth_at)
    bound = est.bound
    ratio = err / bound if est.applicable and bound > 0 else math.inf
    op_err = gap = None
    if operational is not None:
        op_at = _by_time(operational.analyses)
        tail = [s for s in tail if s.time_index in op_at]
        # an operational run that stopped early may not reach the tail
        if tail:
            op_err = _mean_distance([op_at[s.time_index] for s in tail], truth_at)
            gap = _mean_distance(tail, op_at)
    return BoundReport(
        est.applicable,
        err,
        bound,
        ratio,
        run.analyses[start].time_index,
        len(run.analyses) - start,
        op_err,
        gap,
        est.gap_bound if gap is not None else None,
    )


def scalar_steady_state_error(a, kappa, bias, gamma):
    """Exact limiting E|x^s - x^true| for the scalar linear twin.

    Truth ``x+ = a x``, surrogate ``x+ = a x + bias``, ``H = 1``, gain
    ``kappa`` and observation noise ``gamma * N(0, 1)``. The error obeys
    ``e+ = rho e + (1 - kappa) bias + kappa gamma eta`` with
    ``rho = (1 - kappa) a``, so it settles to a Gaussian with mean
    ``(1 - kappa) bias / (1 - rho)`` (the geometric series of the defect) and
    variance ``kappa^2 gamma^2 / (1 - rho^2)``; E|e| is the folded-normal mean.
    """
    rho = (1.0 - kappa) * a
    if abs(rho) >= 1.0:
        raise ParameterError(f"|(1 - kappa) a| = {abs(rho)} >= 1: no steady state")
    mu = (1.0 - kappa) * bias / (1.0 - rho)
    var = kappa**2 * gamma**2 / (1.0 - rho**2)
    if var == 0.0:
        return abs(mu)
    s = math.sqrt(var)
    return s * math.sqrt(2.0 / math.pi) * math.exp(-(mu**2) / (2.0 * var)) + mu * math.erf(mu / (s * math.sqrt(2.0)))


def format_stability_report(est, report=None, extra=None):
    lines = [
        "# empirical estimates: sups over samples are lower bounds of the true constants",
        f"lambda_hat = {est.lambda_hat!r}",
        f"epsilon_hat = {est.epsilon_hat!r}",
        f"gamma_hat = {est.gamma_hat!r}",
        f"sample_count = {est.sample_count}",
        f"c = {est.c!r}",
        f"bound_applicable = {str(est.applicable).lower()}",
        f"bound = {est.bound!r}",
    ]
    if not est.applicable:
        lines.append("# lambda_hat >= 1: the bound does not apply to this configuration")
    if report is not None:
        lines += [
            f"tail_start = {report.tail_start}",
            f"tail_length = {report.tail_length}",
            f"tail_mean_error = {report.tail_mean_error!r}",
            f"ratio = {report.ratio!r}",
        ]
        if report.operational_error is not None:
            lines += [
                f"operational_error = {report.operational_error!r}",
                f"surrogate_gap = {report.surrogate_gap!r}",
                f"gap_bound = {report.gap_bound!r}",
            ]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value!r}" if not isinstance(value, str) else f"{key} = {value}")
    return "\n".join(lines) + "\n"
