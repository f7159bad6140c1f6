"""Biplanar acquisition geometry and per-pixel ray generation.

All lengths are in centimeters. A pixel index ``(px, py)`` addresses the pixel
*center*; ``px`` runs along the detector ``u`` axis and ``py`` along ``v``.
Rays always point from the source side toward the detector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CoverageError, ShapeError, ValidationError

GEOM_SCHEMA = "xden-geom/1"
BIPLANAR_SCHEMA = "xden-biplanar/1"

PARALLEL = "parallel"
CONE = "cone"

#: Distance (cm) that parallel-beam ray origins are set back from the detector plane.
DEFAULT_STANDOFF = 1000.0

_AXIS_TOL = 1e-12


def _vec3(value, name) -> tuple[float, float, float]:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be a finite 3-vector, got {value!r}")
    return tuple(float(x) for x in arr)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            raise ValidationError(f"ray direction must be unit length, |d| = {n!r}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class ProjectionGeometry:
    kind: str
    detector_origin: tuple[float, float, float]
    u_axis: tuple[float, float, float]
    v_axis: tuple[float, float, float]
    pixel_pitch: float
    width: int
    height: int
    i0: float = 1.0
    source_position: tuple[float, float, float] | None = None
    standoff: float = DEFAULT_STANDOFF

    def __post_init__(self):
        if self.kind not in (PARALLEL, CONE):
            raise ValidationError(f"geometry kind must be 'parallel' or 'cone', got {self.kind!r}")
        for name in ("detector_origin", "u_axis", "v_axis"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        u, v = np.array(self.u_axis), np.array(self.v_axis)
        if abs(np.linalg.norm(u) - 1) > _AXIS_TOL or abs(np.linalg.norm(v) - 1) > _AXIS_TOL:
            raise ValidationError("detector u and v axes must be unit vectors")
        if abs(float(u @ v)) >= _AXIS_TOL:
            raise ValidationError(f"detector u and v axes must be orthogonal (u.v = {u @ v!r})")
        if not (self.pixel_pitch > 0 and math.isfinite(self.pixel_pitch)):
            raise ValidationError(f"pixel_pitch must be positive, got {self.pixel_pitch!r}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValidationError("detector width and height must be integers")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"detector must be at least 1x1, got {self.width}x{self.height}")
        if not (self.i0 > 0 and math.isfinite(self.i0)):
            raise ValidationError(f"i0 must be positive, got {self.i0!r}")
        if not self.standoff > 0:
            raise ValidationError("standoff must be positive")
        if self.kind == CONE:
            if self.source_position is None:
                raise ValidationError("cone geometry requires source_position")
            src = _vec3(self.source_position, "source_position")
            object.__setattr__(self, "source_position", src)
            height = float((np.array(src) - np.array(self.detector_origin)) @ self.normal)
            if abs(height) < 1e-9:
                raise ValidationError("cone source lies on the detector plane")
        elif self.source_position is not None:
            object.__setattr__(self, "source_position", None)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u_axis, self.v_axis)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def detector_center(self) -> np.ndarray:
        return (np.array(self.detector_origin)
                + 0.5 * (self.width - 1) * self.pixel_pitch * np.array(self.u_axis)
                + 0.5 * (self.height - 1) * self.pixel_pitch * np.array(self.v_axis))

    def principal_direction(self) -> np.ndarray:
        if self.kind == PARALLEL:
            return self.normal
        d = self.detector_center - np.array(self.source_position)
        return d / np.linalg.norm(d)

    def pixel_center(self, px, py) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        return (np.array(self.detector_origin)
                + np.multiply.outer(px * self.pixel_pitch, self.u_axis)
                + np.multiply.outer(py * self.pixel_pitch, self.v_axis))

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions for every pixel, shape ``(height*width, 3)``.

        Row ``py * width + px`` holds the ray of pixel ``(px, py)``.
        """
        py, px = np.divmod(np.arange(self.n_pixels), self.width)
        centers = self.pixel_center(px, py)
        if self.kind == PARALLEL:
            n = self.normal
            origins = centers - self.standoff * n
            directions = np.broadcast_to(n, centers.shape).copy()
        else:
            origins = np.broadcast_to(np.array(self.source_position), centers.shape).copy()
            directions = centers - origins
            directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return origins, directions

    def to_dict(self) -> dict:
        doc = {
            "schema": GEOM_SCHEMA,
            "kind": self.kind,
            "source_position_cm": list(self.source_position) if self.source_position else None,
            "detector_origin_cm": list(self.detector_origin),
            "u_axis": list(self.u_axis),
            "v_axis": list(self.v_axis),
            "pixel_pitch_cm": self.pixel_pitch,
            "width": self.width,
            "height": self.height,
            "i0": self.i0,
        }
        if self.kind == PARALLEL:
            doc["standoff_cm"] = self.standoff
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ProjectionGeometry":
        if doc.get("schema") != GEOM_SCHEMA:
            raise ValidationError(f"expected schema {GEOM_SCHEMA!r}, got {doc.get('schema')!r}")
        try:
            return cls(
                kind=doc["kind"],
                source_position=doc.get("source_position_cm"),
                detector_origin=doc["detector_origin_cm"],
                u_axis=doc["u_axis"],
                v_axis=doc["v_axis"],
                pixel_pitch=float(doc["pixel_pitch_cm"]),
                width=doc["width"],
                height=doc["height"],
                i0=float(doc["i0"]),
                standoff=float(doc.get("standoff_cm", DEFAULT_STANDOFF)),
            )
        except KeyError as exc:
            raise ValidationError(f"geometry document missing field {exc}") from exc


def ray_for_pixel(geom: ProjectionGeometry, px: int, py: int) -> Ray:
    if not (0 <= px < geom.width and 0 <= py < geom.height):
        raise IndexError(f"pixel ({px}, {py}) outside {geom.width}x{geom.height} detector")
    center = geom.pixel_center(px, py)
    if geom.kind == PARALLEL:
        n = geom.normal
        return Ray(center - geom.standoff * n, n)
    src = np.array(geom.source_position)
    d = center - src
    return Ray(src, d / np.linalg.norm(d))


@dataclass(frozen=True)
class BiplanarSetup:
    view0: ProjectionGeometry
    view1: ProjectionGeometry
    angular_tolerance: float = 1e-6
    allow_distinct_i0: bool = field(default=False, compare=False)

    def __post_init__(self):
        d0, d1 = self.view0.principal_direction(), self.view1.principal_direction()
        angle = math.acos(max(-1.0, min(1.0, float(d0 @ d1))))
        if abs(angle - math.pi / 2) > self.angular_tolerance:
            raise ValidationError(
                f"biplanar views are not orthogonal: angle {math.degrees(angle):.6f} deg"
            )
        if not self.allow_distinct_i0 and self.view0.i0 != self.view1.i0:
            raise ValidationError("biplanar views must share i0 unless allow_distinct_i0 is set")

    @property
    def views(self) -> tuple[ProjectionGeometry, ProjectionGeometry]:
        return (self.view0, self.view1)

    def to_dict(self) -> dict:
        return {
            "schema": BIPLANAR_SCHEMA,
            "angular_tolerance_rad": self.angular_tolerance,
            "views": [self.view0.to_dict(), self.view1.to_dict()],
        }

    @classmethod
    def from_dict(cls, doc) -> "BiplanarSetup":
        if isinstance(doc, list):
            views, tol = doc, 1e-6
        else:
            if doc.get("schema") != BIPLANAR_SCHEMA:
                raise ValidationError(
                    f"expected schema {BIPLANAR_SCHEMA!r}, got {doc.get('schema')!r}")
            views, tol = doc.get("views"), float(doc.get("angular_tolerance_rad", 1e-6))
        if not isinstance(views, list) or len(views) != 2:
            raise ValidationError("biplanar geometry needs exactly two views")
        g0, g1 = (ProjectionGeometry.from_dict(v) for v in views)
        return cls(g0, g1, angular_tolerance=tol, allow_distinct_i0=g0.i0 != g1.i0)


def save_setup(setup: BiplanarSetup, path) -> None:
    Path(path).write_text(json.dumps(setup.to_dict(), indent=2) + "\n")


def load_setup(path) -> BiplanarSetup:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return BiplanarSetup.from_dict(doc)


def _box_corners(lo, hi) -> np.ndarray:
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                     for z in (lo[2], hi[2])], dtype=float)


def _project(geom: ProjectionGeometry, points: np.ndarray) -> np.ndarray:
    """Detector-plane (u, v) coordinates of points, relative to the detector center."""
    c = geom.detector_center
    u, v, n = np.array(geom.u_axis), np.array(geom.v_axis), geom.normal
    if geom.kind == PARALLEL:
        rel = points - c
    else:
        s = np.array(geom.source_position)
        w = points - s
        scale = ((c - s) @ n) / (w @ n)
        rel = s + w * scale[:, None] - c
    return np.stack([rel @ u, rel @ v], axis=1)


def project_points(geom: ProjectionGeometry, points) -> np.ndarray:
    """Fractional pixel coordinates ``(px, py)`` where points project on the detector."""
    uv = _project(geom, np.atleast_2d(np.asarray(points, dtype=float)))
    return uv / geom.pixel_pitch + 0.5 * np.array([geom.width - 1, geom.height - 1])


def make_orthogonal_biplanar(
    bounding_box: Sequence[Sequence[float]],
    detector_resolution: int | tuple[int, int],
    pixel_pitch: float,
    kind: str = CONE,
    i0: float = 1.0,
    margin: float = 0.05,
    source_distance: float | None = None,
) -> BiplanarSetup:
    """Two views looking along +z and +x, each detector covering the whole box.

    ``bounding_box`` is ``(lo, hi)``. For cone beams the source sits on the
    detector's central axis at ``source_distance`` from the box center
    (default: five box diagonals); the detector plane sits just past the box.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in bounding_box)
    if lo.shape != (3,) or hi.shape != (3,):
        raise ValidationError("bounding_box must be a (lo, hi) pair of 3-vectors")
    extent = hi - lo
    if np.any(~np.isfinite(extent)) or np.any(extent <= 0):
        raise CoverageError(f"bounding box is degenerate: extent {extent.tolist()} cm")
    if np.isscalar(detector_resolution) or np.ndim(detector_resolution) == 0:
        width = height = int(detector_resolution)
    else:
        width, height = (int(r) for r in detector_resolution)
    if width < 1 or height < 1 or not pixel_pitch > 0:
        raise ValidationError("detector resolution and pitch must be positive")

    center = 0.5 * (lo + hi)
    diag = float(np.linalg.norm(extent))
    corners = _box_corners(lo, hi)
    # (direction, u, v) with u x v == direction
    frames = [
        ((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
        ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
    ]
    views = []
    for n, u, v in frames:
        n_arr = np.array(n)
        half_n = 0.5 * float(extent @ np.abs(n_arr))
        det_dist = half_n + 0.05 * diag
        det_center = center + det_dist * n_arr
        det_origin = (det_center - 0.5 * (width - 1) * pixel_pitch * np.array(u)
                      - 0.5 * (height - 1) * pixel_pitch * np.array(v))
        if kind == PARALLEL:
            geom = ProjectionGeometry(PARALLEL, det_origin, u, v, pixel_pitch, width, height,
                                      i0=i0, standoff=2.0 * (det_dist + half_n))
        elif kind == CONE:
            sd = 5.0 * diag if source_distance is None else float(source_distance)
            if sd <= half_n:
                raise ValidationError("source_distance must place the source outside the box")
            geom = ProjectionGeometry(CONE, det_origin, u, v, pixel_pitch, width, height,
                                      i0=i0, source_position=center - sd * n_arr)
        else:
            raise ValidationError(f"unknown geometry kind {kind!r}")
        uv = _project(geom, corners)
        need = 2.0 * np.abs(uv).max(axis=0) * (1.0 + margin)
        have = np.array([width, height]) * pixel_pitch
        if np.any(need > have + 1e-12):
            raise CoverageError(
                f"detector of {have[0]:g} x {have[1]:g} cm cannot cover the box: "
                f"need at least {need[0]:g} x {need[1]:g} cm "
                f"(view along {list(n)}, {margin:.0%} margin)"
            )
        views.append(geom)
    return BiplanarSetup(views[0], views[1])


def check_matching(geom: ProjectionGeometry, width: int, height: int, what: str = "image"):
    if (geom.width, geom.height) != (width, height):
        raise ShapeError(
            f"{what} is {width}x{height} but the detector is {geom.width}x{geom.height}")
