import numpy as np
import pytest

from conftest import dense_conv_matrix, dense_H
from surrogate_da.conv import build_kernel
from surrogate_da.covariance import BackgroundCovariance, build_gain
from surrogate_da.dynamics import LinearDynamics, Lorenz96Config, SurrogatePerturbation
from surrogate_da.errors import DimensionError, ParameterError, SequencingError
from surrogate_da.filter import (
    FilterConfig,
    assimilate_step,
    divergence_detect,
    operational_filter,
    ranges_from_truth,
    run_filter,
)
from surrogate_da.grid import GridGeometry, GridState, read_snapshot
from surrogate_da.metrics import rmse
from surrogate_da.obs import ObservationBatch, ThinningOperator, apply_H, interpolate_baseline, observe


def _l96_setup(n=8, stride=2, r=0.01, bias=0.2, smoothing=False):
    F = Lorenz96Config(n)
    Fs = SurrogatePerturbation(F, bias, apply_smoothing=smoothing)
    op = ThinningOperator(stride, F.geometry)
    kernel = build_kernel(stride, 8.0)
    cov = BackgroundCovariance.default(kernel)
    gain = build_gain(cov, op, r)
    B = dense_conv_matrix(1, n, kernel.weights)
    C = cov.q * B @ B.T
    H = dense_H(1, n, stride)
    K = C @ H.T @ np.linalg.inv(H @ C @ H.T + r * np.eye(H.shape[0]))
    return F, Fs, op, gain, K, H


def _truth(F, T, seed=0, spinup=300):
    x = F.initial_state(np.random.default_rng(seed), 1.0)
    for _ in range(spinup):
        x = F.step(x)
    x = x.with_time(0)
    out = [x]
    for _ in range(T):
        out.append(F.step(out[-1]))
    return out


class TestAssimilateStep:
    def test_dense_analysis_l96(self, rng):
        F, Fs, op, gain, K, H = _l96_setup()
        truth = _truth(F, 5)
        x = truth[0].with_values(truth[0].values + 0.3 * rng.standard_normal((1, 1, 8)))
        cfg = FilterConfig(Fs, gain, op, x, 5)
        for t in range(1, 6):
            y = observe(truth[t], op, 0.01, rng)
            fc, an = assimilate_step(cfg, x, y)
            xs = Fs.step(x).values.ravel()
            want = (np.eye(8) - K @ H) @ xs + K @ y.values
            assert np.allclose(fc.values.ravel(), xs, rtol=0, atol=0)
            assert np.allclose(an.values.ravel(), want, rtol=0, atol=1e-10)
            assert an.time_index == t
            x = an

    def test_residual_identity(self, rng):
        F, Fs, op, gain, K, H = _l96_setup(n=12, stride=3, r=0.05)
        x = _truth(F, 0)[0]
        cfg = FilterConfig(Fs, gain, op, x, 1)
        y = ObservationBatch(rng.standard_normal(op.d_y) + apply_H(Fs.step(x), op), 1, 0.05)
        fc, an = assimilate_step(cfg, x, y)
        lhs = apply_H(an, op) - y.values
        rhs = (np.eye(op.d_y) - H @ K) @ (apply_H(fc, op) - y.values)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_observed_pull(self, rng):
        F, Fs, op, gain, _, _ = _l96_setup(r=1e-6)
        x = _truth(F, 0)[0]
        cfg = FilterConfig(Fs, gain, op, x, 1)
        y = ObservationBatch(rng.standard_normal(op.d_y) * 2.0 + 8.0, 1, 1e-6)
        fc, an = assimilate_step(cfg, x, y)
        before = np.abs(y.values - apply_H(fc, op))
        after = np.abs(y.values - apply_H(an, op))
        assert np.all(after < before)

    def test_perfect_observations_identity_dynamics(self, rng):
        g = GridGeometry(2, 3, 4)
        op = ThinningOperator(1, g)
        gain = build_gain(BackgroundCovariance.default(build_kernel(1, 1.0)), op, 1e-13)
        x0 = GridState(g, rng.standard_normal(g.shape))
        cfg = FilterConfig(LinearDynamics.identity(24), gain, op, x0, 1)
        y = ObservationBatch(rng.standard_normal(24), 1, 0.0)
        _, an = assimilate_step(cfg, x0, y)
        assert np.allclose(an.values.ravel(), y.values, atol=1e-11)

    def test_zero_innovation(self):
        F, Fs, op, gain, _, _ = _l96_setup()
        x = _truth(F, 0)[0]
        cfg = FilterConfig(Fs, gain, op, x, 1)
        y = ObservationBatch(apply_H(Fs.step(x), op), 1, 0.01)
        fc, an = assimilate_step(cfg, x, y)
        assert np.array_equal(an.values, fc.values)

    def test_sequencing(self):
        F, Fs, op, gain, _, _ = _l96_setup()
        x = _truth(F, 0)[0]
        cfg = FilterConfig(Fs, gain, op, x, 1)
        with pytest.raises(SequencingError):
            assimilate_step(cfg, x, ObservationBatch(np.zeros(op.d_y), 2, 0.01))

    def test_config_validation(self):
        F, Fs, op, gain, _, _ = _l96_setup()
        x = _truth(F, 0)[0]
        with pytest.raises(ParameterError):
            FilterConfig(Fs, gain, op, x, 0)
        with pytest.raises(DimensionError):
            FilterConfig(Fs, gain, op, GridState.zeros(GridGeometry(1, 1, 9)), 3)


class TestDivergence:
    def _state(self, values):
        return GridState(GridGeometry(1, 1, len(values)), values)

    def test_threshold(self):
        assert divergence_detect(self._state([33.1]), [0.0], [30.0]).flag
        assert not divergence_detect(self._state([33.0]), [0.0], [30.0]).flag
        assert not divergence_detect(self._state([0.0, 12.0, 30.0]), [0.0], [30.0]).flag

    @pytest.mark.parametrize("lo,hi", [(-5.0, 20.0), (1.0, 2.0), (-3.0, -1.0)])
    def test_minimum_side(self, lo, hi):
        below = lo - 0.1 * abs(lo)
        assert not divergence_detect(self._state([below]), [lo], [hi]).flag
        assert divergence_detect(self._state([below - 1e-9]), [lo], [hi]).flag

    def test_mask_per_point_and_feature(self):
        g = GridGeometry(2, 1, 3)
        s = GridState(g, [[[0.0, 5.0, 12.0]], [[0.0, -2.0, 1.0]]])
        res = divergence_detect(s, [0.0, -1.0], [10.0, 1.0])
        assert res.mask.tolist() == [[[False, False, True]], [[False, True, False]]]

    def test_non_finite_flagged(self):
        g = GridGeometry(1, 1, 2)
        s = GridState(g, [np.nan, 1.0], diverged=True)
        assert divergence_detect(s, [0.0], [2.0]).mask.ravel().tolist() == [True, False]

    def test_run_wide_reference(self):
        g = GridGeometry(2, 1, 2)
        truth = [GridState(g, [[[t, -t]], [[1.0, 2.0 + t]]], t) for t in range(4)]
        mins, maxs = ranges_from_truth(truth, per_time=False)(1)
        assert mins.tolist() == [-3.0, 1.0] and maxs.tolist() == [3.0, 5.0]
        mins, maxs = ranges_from_truth(truth)(1)
        assert mins.tolist() == [-1.0, 1.0] and maxs.tolist() == [1.0, 3.0]

    def test_reference_must_be_finite(self):
        with pytest.raises(ParameterError):
            divergence_detect(self._state([1.0]), [np.inf], [2.0])

    def test_filter_halts_on_spike(self):
        g = GridGeometry(1, 1, 4)
        op = ThinningOperator(1, g)
        gain = build_gain(BackgroundCovariance.default(build_kernel(1, 1.0)), op, 1e-6)
        truth = [GridState(g, np.array([0.0, 1.0, 2.0, 3.0]), t) for t in range(11)]
        obs = [ObservationBatch(truth[t].values.ravel() * (50.0 if t == 6 else 1.0), t, 1e-6) for t in range(1, 11)]
        cfg = FilterConfig(LinearDynamics.identity(4), gain, op, truth[0], 10)
        run = run_filter(cfg, obs, ranges_from_truth(truth))
        assert run.diverged_at == 6
        assert [s.time_index for s in run.analyses] == [1, 2, 3, 4, 5]
        assert len(run.forecasts) == 5


class TestRunFilter:
    def test_horizon_one_is_one_step(self, rng):
        F, Fs, op, gain, _, _ = _l96_setup()
        truth = _truth(F, 1)
        y = observe(truth[1], op, 0.01, rng)
        cfg = FilterConfig(Fs, gain, op, truth[0], 1)
        run = run_filter(cfg, [y])
        _, an = assimilate_step(cfg, truth[0], y)
        assert run.analyses[0] == an and run.diverged_at is None
        assert run.states()[0] is truth[0]

    def test_truncated_stream(self):
        F, Fs, op, gain, _, _ = _l96_setup()
        truth = _truth(F, 10)
        obs = [observe(truth[t], op, 0.01, t) for t in range(1, 11)]
        cfg = FilterConfig(Fs, gain, op, truth[0], 100)
        with pytest.raises(SequencingError, match="t=11"):
            run_filter(cfg, obs)

    def test_out_of_order(self):
        F, Fs, op, gain, _, _ = _l96_setup()
        truth = _truth(F, 3)
        obs = [observe(truth[t], op, 0.01, t) for t in (1, 3, 2)]
        with pytest.raises(SequencingError):
            run_filter(FilterConfig(Fs, gain, op, truth[0], 3), obs)

    def test_snapshots_and_cadence(self, tmp_path):
        F, Fs, op, gain, _, _ = _l96_setup()
        truth = _truth(F, 6)
        obs = [observe(truth[t], op, 0.01, t) for t in range(1, 7)]
        run = run_filter(FilterConfig(Fs, gain, op, truth[0], 6), obs, snapshot_dir=tmp_path, cadence=3)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["t0.grid", "t3.grid", "t6.grid"]
        assert read_snapshot(tmp_path / "t6.grid") == run.analyses[-1]

    def test_twin_experiment_bounded(self):
        F, Fs, op, gain, _, _ = _l96_setup(n=40, stride=2, r=0.01, smoothing=True)
        T = 3000
        truth = _truth(F, T)
        obs = [observe(truth[t], op, 0.01, t) for t in range(T + 1)]
        kernel = build_kernel(2, 8.0)
        x0 = interpolate_baseline(obs[0], op, kernel)
        # 40 values per time make per-time extremes noisy; a long run-wide range is stable
        run = run_filter(FilterConfig(Fs, gain, op, x0, T), obs[1:], ranges_from_truth(truth, per_time=False))
        assert run.diverged_at is None
        ana = np.array([rmse(s, truth[s.time_index]) for s in run.analyses])
        free = [x0]
        for _ in range(T):
            free.append(Fs.step(free[-1]))
        fr = np.array([rmse(s, truth[s.time_index]) for s in free[1:]])
        half = T // 2
        assert ana[half:].max() < 6.0
        assert fr[half:].mean() > 2 * ana[half:].mean()


class TestOperational:
    def test_coincides_without_perturbation(self, rng):
        F = Lorenz96Config(8)
        op = ThinningOperator(2, F.geometry)
        gain = build_gain(BackgroundCovariance.default(build_kernel(2, 8.0)), op, 0.01)
        truth = _truth(F, 50)
        obs = [observe(truth[t], op, 0.01, rng) for t in range(1, 51)]
        x0 = truth[0].with_values(truth[0].values + 0.5)
        cfg = FilterConfig(SurrogatePerturbation(F), gain, op, x0, 50)
        s = run_filter(cfg, obs)
        o = operational_filter(cfg, obs, F)
        for a, b in zip(s.analyses, o.analyses):
            assert a.values.tobytes() == b.values.tobytes()

    def test_truth_initialised_contraction(self):
        F = Lorenz96Config(8)
        op = ThinningOperator(1, F.geometry)
        gain = build_gain(BackgroundCovariance.default(build_kernel(1, 8.0)), op, 0.05)
        truth = _truth(F, 10)
        obs = [observe(truth[t], op, 0.0, t) for t in range(1, 11)]
        x0 = truth[0].with_values(truth[0].values + 1.0)
        o = operational_filter(FilterConfig(F, gain, op, x0, 10), obs, F)
        err = [np.linalg.norm(s.values - truth[s.time_index].values) for s in o.analyses]
        ratios = np.array(err[1:6]) / np.array(err[:5])
        assert np.all(ratios < 0.5)
