"""Brute-force oracles shared by the test modules.

Everything here is deliberately naive (explicit loops, dense matrices) and
does not reuse the package's kernels, so agreement is a real check.
"""

import math

import numpy as np
import pytest


def gaussian_weights_oracle(k, sigma2):
    m = k // 2
    w = [[math.exp(-((i - m) ** 2 + (j - m) ** 2) / (2.0 * sigma2)) for j in range(k)] for i in range(k)]
    total = sum(sum(row) for row in w)
    return np.array([[v / total for v in row] for row in w])


def dense_conv_matrix(n_lat, n_lon, w, periodic_lon=False):
    """B as a (n_lat*n_lon)^2 matrix from the replication-padding definition."""
    k = w.shape[0]
    m = k // 2
    B = np.zeros((n_lat * n_lon, n_lat * n_lon))
    for i in range(n_lat):
        for j in range(n_lon):
            row = i * n_lon + j
            for a in range(k):
                si = min(max(i - m + a, 0), n_lat - 1)
                for c in range(k):
                    sj = j - m + c
                    sj = sj % n_lon if periodic_lon else min(max(sj, 0), n_lon - 1)
                    B[row, si * n_lon + sj] += w[a, c]
    return B


def dense_H(n_lat, n_lon, stride, lat_offset=0, lon_offset=0):
    rows = []
    for i in range(lat_offset, n_lat, stride):
        for j in range(lon_offset, n_lon, stride):
            e = np.zeros(n_lat * n_lon)
            e[i * n_lon + j] = 1.0
            rows.append(e)
    return np.array(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
