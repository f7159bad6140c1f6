"""Exact per-region path lengths of rays through a label grid.

Each ray is clipped to the grid's bounding box (``t >= 0``) and walked from
voxel face to voxel face. Every segment between consecutive crossings is
charged to the label of the voxel containing its midpoint, which makes a
crossing exactly on a face belong to the *following* voxel. Segments shorter
than :data:`MIN_SEGMENT` are dropped.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numba
import numpy as np

from .geometry import BiplanarSetup, Ray
from .volume import LabelVolume

MIN_SEGMENT = 1e-12

# the bundled TBB is too old for numba; prefer OpenMP without the warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]


@numba.njit(cache=True)
def _clip(o, d, lo, hi):
    t0, t1 = 0.0, np.inf
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 0.0, -1.0
        else:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
    return t0, t1


@numba.njit(cache=True)
def _walk(o, d, lo, h, labels, out, first):
    """Accumulate segment lengths into ``out[label]``; returns the clipped chord.

    ``first[label]`` receives the entry parameter of the first segment with
    that label (left untouched for labels never met).
    """
    n = labels.shape
    hi = np.empty(3)
    for a in range(3):
        hi[a] = lo[a] + n[a] * h
    t0, t1 = _clip(o, d, lo, hi)
    if not t1 > t0:
        return 0.0

    t_next = np.full(3, np.inf)
    plane = np.zeros(3, dtype=np.int64)
    step = np.zeros(3, dtype=np.int64)
    for a in range(3):
        if d[a] == 0.0:
            continue
        p = (o[a] + t0 * d[a] - lo[a]) / h
        if d[a] > 0:
            step[a] = 1
            plane[a] = np.int64(np.floor(p)) + 1
        else:
            step[a] = -1
            plane[a] = np.int64(np.ceil(p)) - 1
        t_next[a] = (lo[a] + plane[a] * h - o[a]) / d[a]
        while t_next[a] <= t0:
            plane[a] += step[a]
            t_next[a] = (lo[a] + plane[a] * h - o[a]) / d[a]

    t = t0
    while t < t1:
        tn = min(t_next[0], min(t_next[1], t_next[2]))
        end = min(tn, t1)
        seg = end - t
        if seg >= MIN_SEGMENT:
            mid = t + 0.5 * seg
            i = np.int64(np.floor((o[0] + mid * d[0] - lo[0]) / h))
            j = np.int64(np.floor((o[1] + mid * d[1] - lo[1]) / h))
            k = np.int64(np.floor((o[2] + mid * d[2] - lo[2]) / h))
            i = min(max(i, 0), n[0] - 1)
            j = min(max(j, 0), n[1] - 1)
            k = min(max(k, 0), n[2] - 1)
            lab = labels[i, j, k]
            if out[lab] == 0.0 and first[lab] == np.inf:
                first[lab] = t
            out[lab] += seg
        t = end
        for a in range(3):
            if t_next[a] == tn:
                plane[a] += step[a]
                t_next[a] = (lo[a] + plane[a] * h - o[a]) / d[a]
    return t1 - t0


@numba.njit(parallel=True, cache=True)
def _trace_many(origins, directions, lo, h, labels, n_labels, out):
    for r in numba.prange(origins.shape[0]):
        first = np.full(n_labels, np.inf)
        _walk(origins[r], directions[r], lo, h, labels, out[r], first)


@dataclass(frozen=True)
class RegionLengths:
    """Nonzero ``(region_id, length_cm)`` pairs of one ray, in order of first entry."""

    pairs: tuple[tuple[int, float], ...]
    chord: float = 0.0

    def total(self) -> float:
        return sum(length for _, length in self.pairs)

    def as_dict(self) -> dict[int, float]:
        return dict(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)


def _grid_args(vol: LabelVolume):
    lo, _ = vol.bounds
    return lo.astype(np.float64), float(vol.voxel_size), np.ascontiguousarray(vol.labels)


def trace_region_lengths(vol: LabelVolume, ray: Ray) -> RegionLengths:
    lo, h, labels = _grid_args(vol)
    n = len(vol.regions)
    out = np.zeros(n)
    first = np.full(n, np.inf)
    chord = _walk(np.asarray(ray.origin, dtype=np.float64),
                  np.asarray(ray.direction, dtype=np.float64), lo, h, labels, out, first)
    hit = [k for k in range(n) if out[k] > 0.0]
    hit.sort(key=lambda k: first[k])
    return RegionLengths(tuple((k, float(out[k])) for k in hit), float(chord))


def trace_rays(vol: LabelVolume, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Dense ``(n_rays, K+1)`` table of path lengths for many rays."""
    lo, h, labels = _grid_args(vol)
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(origins), len(vol.regions)))
    _trace_many(origins, directions, lo, h, labels, len(vol.regions), out)
    return out


def ray_box_chord(vol: LabelVolume, origin, direction) -> float:
    lo, hi = vol.bounds
    t0, t1 = _clip(np.asarray(origin, dtype=np.float64), np.asarray(direction, dtype=np.float64),
                   lo, hi)
    return max(0.0, t1 - t0)


def provenance_hash(vol: LabelVolume, setup: BiplanarSetup) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(vol.labels, dtype="<u2").tobytes())
    meta = {"dims": vol.dims, "voxel_size": vol.voxel_size, "origin": vol.origin,
            "regions": [[r.id, r.name] for r in vol.regions], "setup": setup.to_dict()}
    digest.update(json.dumps(meta, sort_keys=True).encode())
    return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class PathLengthMatrix:
    """Per-view tables ``lengths[i][p, k]``: length (cm) of pixel ``p``'s ray in region ``k``.

    Pixels are flattened row-major (``p = py * width + px``). The table is
    stored densely because K is small; zero entries are simply absent
    regions.
    """

    setup: BiplanarSetup
    lengths: tuple[np.ndarray, np.ndarray]
    region_names: tuple[str, ...]
    provenance: str = ""

    def __post_init__(self):
        for arr in self.lengths:
            arr.setflags(write=False)

    @property
    def n_regions(self) -> int:
        """K, excluding air."""
        return len(self.region_names) - 1

    def shape(self, view: int) -> tuple[int, int]:
        g = self.setup.views[view]
        return g.width, g.height

    def region_lengths(self, view: int, px: int, py: int) -> RegionLengths:
        w, h = self.shape(view)
        if not (0 <= px < w and 0 <= py < h):
            raise IndexError(f"pixel ({px}, {py}) outside {w}x{h} detector")
        row = self.lengths[view][py * w + px]
        return RegionLengths(tuple((k, float(v)) for k, v in enumerate(row) if v > 0.0),
                             float(row.sum()))

    def total_lengths(self) -> np.ndarray:
        """Summed path length per region over both views."""
        return self.lengths[0].sum(axis=0) + self.lengths[1].sum(axis=0)

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for view in (0, 1):
                w, h = self.shape(view)
                for p, row in enumerate(self.lengths[view]):
                    py, px = divmod(p, w)
                    pairs = [[k, float(v)] for k, v in enumerate(row) if v > 0.0]
                    fh.write(json.dumps({"view": view, "px": px, "py": py, "pairs": pairs}) + "\n")


def build_path_matrix(vol: LabelVolume, setup: BiplanarSetup) -> PathLengthMatrix:
    tables = []
    for geom in setup.views:
        origins, directions = geom.rays()
        tables.append(trace_rays(vol, origins, directions))
    return PathLengthMatrix(setup, tuple(tables), tuple(vol.region_names()),
                            provenance_hash(vol, setup))
