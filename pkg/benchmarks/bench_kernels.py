"""Time the numba kernels against their numpy fallbacks.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20] [--lat 90] [--lon 180]

Each kernel is called once per backend before timing so JIT compilation
(and the on-disk cache load) is excluded. The two outputs are also compared
so a speedup never hides a wrong answer.
"""

import argparse
import time

import numpy as np

from surrogate_da import _accel
from surrogate_da.conv import build_kernel, convolve_adjoint_array, convolve_array
from surrogate_da.dynamics import Advection2DConfig, Lorenz96Config
from surrogate_da.grid import GridGeometry, GridState


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n_lat, n_lon):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, n_lat, n_lon))
    for k in (2, 4, 8):
        w = build_kernel(k, 8.0).weights
        yield f"conv k={k}", lambda b, w=w: convolve_array(x, w, True, b)
        yield f"adjoint k={k}", lambda b, w=w: convolve_adjoint_array(x, w, True, b)

    state = GridState(GridGeometry(3, n_lat, n_lon), x)

    def advect(b):
        return Advection2DConfig((0.5, 0.1), 0.1, backend=b).step(state).values

    yield "advection step", advect

    l96 = GridState(GridGeometry(1, 1, 40, (0.0,)), 8.0 + rng.standard_normal(40))

    def lorenz(b):
        cfg = Lorenz96Config(40, backend=b)
        s = l96
        for _ in range(100):
            s = cfg.step(s)
        return s.values

    yield "lorenz96 x100", lorenz


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--lat", type=int, default=90)
    ap.add_argument("--lon", type=int, default=180)
    args = ap.parse_args()

    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"grid 3x{args.lat}x{args.lon}, best of {args.repeat}")
    print(f"{'kernel':<16}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max diff':>11}")
    for name, fn in cases(args.lat, args.lon):
        diff = float(np.max(np.abs(fn("numba") - fn("numpy"))))
        t_nb = best_of(lambda: fn("numba"), args.repeat)
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        print(f"{name:<16}{t_nb * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_nb:>8.1f}x{diff:>11.1e}")


if __name__ == "__main__":
    main()
