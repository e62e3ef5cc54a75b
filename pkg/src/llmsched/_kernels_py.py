"""Pure-Python kernels. Reference semantics for the compiled ``_kernels`` module."""
from bisect import bisect_right

import numpy as np


def _bracket(xs, x):
    # index i with xs[i] <= x <= xs[i+1]; caller guarantees xs[0] <= x <= xs[-1]
    n = len(xs)
    i = bisect_right(xs, x) - 1
    if i >= n - 1:
        i = n - 2
    if i < 0:
        i = 0
    return i


def interp1(xs, ys, x):
    """Piecewise-linear interpolation on a strictly increasing grid."""
    if len(xs) == 1:
        return float(ys[0])
    i = _bracket(xs, x)
    x0 = xs[i]
    x1 = xs[i + 1]
    w = (x - x0) / (x1 - x0)
    return float(ys[i] * (1.0 - w) + ys[i + 1] * w)


def interp2(xs, ys, table, x, y):
    """Bilinear interpolation of ``table[i][j]`` sampled at ``(xs[i], ys[j])``."""
    if len(xs) == 1:
        return interp1(ys, table[0], y)
    if len(ys) == 1:
        return interp1(xs, [row[0] for row in table], x)
    i = _bracket(xs, x)
    j = _bracket(ys, y)
    wx = (x - xs[i]) / (xs[i + 1] - xs[i])
    wy = (y - ys[j]) / (ys[j + 1] - ys[j])
    a = table[i][j] * (1.0 - wy) + table[i][j + 1] * wy
    b = table[i + 1][j] * (1.0 - wy) + table[i + 1][j + 1] * wy
    return float(a * (1.0 - wx) + b * wx)


def flow_shop(times, release, stage_free):
    """Permutation flow shop: jobs visit stages in order, each stage serves one job at a time.

    ``times[j][k]`` is the duration of job ``j`` on stage ``k``. ``stage_free`` is
    updated in place. Returns ``(starts, ends)`` as ``(jobs, stages)`` arrays.
    """
    times = np.asarray(times, dtype=float)
    n_jobs, n_stages = times.shape
    starts = np.empty((n_jobs, n_stages))
    ends = np.empty((n_jobs, n_stages))
    for j in range(n_jobs):
        ready = release[j]
        for k in range(n_stages):
            s = ready if ready > stage_free[k] else stage_free[k]
            e = s + times[j, k]
            starts[j, k] = s
            ends[j, k] = e
            stage_free[k] = e
            ready = e
    return starts, ends


def cyclic_pipeline(times, n_rounds, t0):
    """Micro-batches cycling through a pipeline for ``n_rounds`` iterations.

    Micro-batch ``m`` may begin round ``r`` once the first stage is free and its
    own round ``r - 1`` has left the last stage. ``times[m][k]`` is the stage time
    of micro-batch ``m`` on stage ``k``. Returns ``(starts, ends)`` shaped
    ``(n_rounds, M, stages)``.
    """
    times = np.asarray(times, dtype=float)
    n_mb, n_stages = times.shape
    free = [t0] * n_stages
    last = [t0] * n_mb
    starts = np.empty((n_rounds, n_mb, n_stages))
    ends = np.empty((n_rounds, n_mb, n_stages))
    for r in range(n_rounds):
        for m in range(n_mb):
            ready = last[m]
            for k in range(n_stages):
                s = ready if ready > free[k] else free[k]
                e = s + times[m, k]
                starts[r, m, k] = s
                ends[r, m, k] = e
                free[k] = e
                ready = e
            last[m] = ready
    return starts, ends
