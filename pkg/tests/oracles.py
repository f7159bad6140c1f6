"""Independent reference computations used to check the fast paths."""

import numpy as np


def chord_length(lo, hi, origin, direction):
    """``(length, t_enter)`` of ``{origin + t d : t >= 0}`` inside the box, via per-axis slabs."""
    lo, hi, o, d = (np.asarray(v, dtype=float) for v in (lo, hi, origin, direction))
    t_enter, t_exit = 0.0, np.inf
    for a in range(3):
        if d[a] == 0:
            if not lo[a] <= o[a] <= hi[a]:
                return 0.0, 0.0
            continue
        ts = sorted([(lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]])
        t_enter, t_exit = max(t_enter, ts[0]), min(t_exit, ts[1])
    return max(0.0, t_exit - t_enter), t_enter


def fine_step_lengths(vol, origin, direction, step_fraction=0.01):
    """Sample the ray every ``voxel_size * step_fraction`` and sum step * indicator per label."""
    lo, hi = vol.bounds
    res = chord_length(lo, hi, origin, direction)
    out = np.zeros(len(vol.regions))
    chord, t0 = res
    if chord <= 0:
        return out, np.zeros(0, dtype=int)
    step = vol.voxel_size * step_fraction
    n = int(np.ceil(chord / step))
    t = t0 + (np.arange(n) + 0.5) * step
    w = np.full(n, step)
    w[-1] = chord - step * (n - 1)
    t[-1] = t0 + step * (n - 1) + 0.5 * w[-1]
    pts = np.asarray(origin) + t[:, None] * np.asarray(direction)
    idx = np.floor((pts - lo) / vol.voxel_size).astype(int)
    idx = np.clip(idx, 0, np.array(vol.dims) - 1)
    labels = vol.labels[idx[:, 0], idx[:, 1], idx[:, 2]]
    np.add.at(out, labels, w)
    return out, labels


def label_changes(labels):
    return int(np.count_nonzero(np.diff(labels)))


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
