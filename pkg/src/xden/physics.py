"""Mass properties of density fields and quasi-static pick/place/push stability.

Conventions: lengths in cm, masses in g, gravity 9.81 m/s^2 along -z of the
volume frame, ground plane ``z = ground_z`` (default 0). Forces are reported
in N and moments in N*cm; the g -> kg conversion happens only when a force is
formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateError, ValidationError
from .recon import DensityField, tree_sum

GRAVITY = 9.81  # m/s^2
STABLE, UNSTABLE, MARGINAL = "stable", "unstable", "marginal"


def weight_newtons(mass_g: float) -> float:
    return mass_g * 1e-3 * GRAVITY


@dataclass(frozen=True, eq=False)
class MassProperties:
    mass: float  # g
    com: np.ndarray  # cm
    inertia: np.ndarray  # g*cm^2 about the CoM

    def to_dict(self) -> dict:
        return {"mass_g": self.mass, "com_cm": [float(c) for c in self.com],
                "inertia_g_cm2": [[float(v) for v in row] for row in self.inertia]}

    @classmethod
    def from_dict(cls, doc: dict) -> "MassProperties":
        try:
            return cls(float(doc["mass_g"]), np.array(doc["com_cm"], dtype=float),
                       np.array(doc.get("inertia_g_cm2", np.zeros((3, 3))), dtype=float))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed mass properties ({exc})") from exc


def _voxel_masses(field_: DensityField, exclude_nan: bool) -> np.ndarray:
    rho = field_.rho
    if np.isnan(rho).any():
        if not exclude_nan:
            raise ValidationError("density field has unknown (NaN) voxels; "
                                  "pass exclude_nan=True to ignore them")
        rho = np.nan_to_num(rho, nan=0.0)
    return rho * field_.voxel_size ** 3


def _second_moments(field_: DensityField, m: np.ndarray, point) -> np.ndarray:
    """``S[a, b] = sum_v m_v (x_a - p_a)(x_b - p_b)`` from 1-D and 2-D marginals."""
    h = field_.voxel_size
    coords = [field_.origin[a] + h * np.arange(field_.dims[a]) - point[a] for a in range(3)]
    s = np.empty((3, 3))
    for a in range(3):
        others = tuple(i for i in range(3) if i != a)
        marg = m.sum(axis=others)
        s[a, a] = tree_sum(marg * coords[a] ** 2)
    for a, b in ((0, 1), (0, 2), (1, 2)):
        c = 3 - a - b
        marg = m.sum(axis=c)  # (n_a, n_b)
        s[a, b] = s[b, a] = float(coords[a] @ marg @ coords[b])
    return s


def _inertia_from_moments(s: np.ndarray, mass: float, h: float) -> np.ndarray:
    inertia = np.trace(s) * np.eye(3) - s
    # each voxel is a uniform cube, adding m h^2 / 6 about every axis
    return inertia + mass * h * h / 6.0 * np.eye(3)


def mass_properties(field_: DensityField, exclude_nan: bool = False) -> MassProperties:
    m = _voxel_masses(field_, exclude_nan)
    mass = float(tree_sum(m.ravel()))
    if not mass > 0:
        raise DegenerateError("density field has zero total mass")
    h = field_.voxel_size
    com = np.empty(3)
    for a in range(3):
        others = tuple(i for i in range(3) if i != a)
        coords = field_.origin[a] + h * np.arange(field_.dims[a])
        com[a] = tree_sum(m.sum(axis=others) * coords) / mass
    inertia = _inertia_from_moments(_second_moments(field_, m, com), mass, h)
    return MassProperties(mass, com, inertia)


def inertia_about(field_: DensityField, point, exclude_nan: bool = False) -> np.ndarray:
    """Inertia tensor (g*cm^2) about an arbitrary point, summed directly."""
    m = _voxel_masses(field_, exclude_nan)
    mass = float(tree_sum(m.ravel()))
    s = _second_moments(field_, m, np.asarray(point, dtype=float))
    return _inertia_from_moments(s, mass, field_.voxel_size)


def parallel_axis(props: MassProperties, point) -> np.ndarray:
    d = np.asarray(point, dtype=float) - props.com
    return props.inertia + props.mass * (float(d @ d) * np.eye(3) - np.outer(d, d))


# --------------------------------------------------------------------------
# Support polygons
# --------------------------------------------------------------------------

def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> list[tuple[float, float]]:
    """Counterclockwise hull starting at the lowest (then leftmost) point.

    Collinear input yields its two extreme points; a single point yields itself.
    """
    pts = sorted(set((float(p[0]), float(p[1])) for p in points))
    if len(pts) <= 2:
        hull = pts
    else:
        lower, upper = [], []
        for p in pts:
            while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
                lower.pop()
            lower.append(p)
        for p in reversed(pts):
            while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
                upper.pop()
            upper.append(p)
        hull = lower[:-1] + upper[:-1]
    start = min(range(len(hull)), key=lambda i: (hull[i][1], hull[i][0]))
    return hull[start:] + hull[:start]


def _segment_distance(q, a, b) -> float:
    q, a, b = (np.asarray(v, dtype=float) for v in (q, a, b))
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(1.0, max(0.0, float((q - a) @ ab) / denom))
    return float(np.linalg.norm(q - (a + t * ab)))


@dataclass(frozen=True)
class SupportPolygon:
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2) if len(self.points) else None
        if pts is None or not np.all(np.isfinite(pts)):
            raise ValidationError("support polygon needs at least one finite 2-D point")
        object.__setattr__(self, "points", tuple(map(tuple, pts.tolist())))

    @classmethod
    def disk(cls, radius: float, n: int = 360, center=(0.0, 0.0)) -> "SupportPolygon":
        ang = 2 * np.pi * np.arange(n) / n
        return cls(tuple(zip(center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang))))

    def hull(self) -> list[tuple[float, float]]:
        return convex_hull(self.points)

    def signed_distance(self, q) -> float:
        """Distance from ``q`` to the hull boundary, positive inside."""
        hull = self.hull()
        if len(hull) == 1:
            return -float(np.hypot(q[0] - hull[0][0], q[1] - hull[0][1]))
        if len(hull) == 2:
            return -_segment_distance(q, hull[0], hull[1])
        edges = list(zip(hull, hull[1:] + hull[:1]))
        inside = all(_cross(a, b, q) >= 0 for a, b in edges)
        if inside:
            return min(_cross(a, b, q) / math.dist(a, b) for a, b in edges)
        return -min(_segment_distance(q, a, b) for a, b in edges)


@dataclass(frozen=True)
class Tilt:
    """Rigid rotation of the body by ``angle_deg`` about ``axis`` through ``pivot``."""

    angle_deg: float
    axis: tuple[float, float, float] = (0.0, 1.0, 0.0)
    pivot: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def apply(self, point) -> np.ndarray:
        axis = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(axis)
        if not n > 0:
            raise ValidationError("tilt axis must be nonzero")
        rot = Rotation.from_rotvec(math.radians(self.angle_deg) * axis / n)
        pivot = np.asarray(self.pivot, dtype=float)
        return pivot + rot.apply(np.asarray(point, dtype=float) - pivot)


@dataclass
class StabilityReport:
    scenario: str
    verdict: str
    driving_moment: float  # N*cm
    margin: float
    margin_unit: str
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "verdict": self.verdict,
                "driving_moment_Ncm": self.driving_moment, "margin": self.margin,
                "margin_unit": self.margin_unit, "details": self.details}


def _verdict(margin: float, tolerance: float, failed: bool | None = None) -> str:
    if abs(margin) < tolerance:
        return MARGINAL
    if failed is None:
        failed = margin < 0
    return UNSTABLE if failed else STABLE


def _unit(v, name) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValidationError(f"{name} must be a unit 3-vector, got {v.tolist()}")
    return v


def grasp_stability(props: MassProperties, grasp_point, grasp_axis, max_friction_torque: float,
                    tolerance: float = 1e-6) -> StabilityReport:
    """Gravitational moment about the grasp axis versus the grip's friction torque."""
    axis = _unit(grasp_axis, "grasp_axis")
    if not max_friction_torque > 0:
        raise ValidationError(f"max_friction_torque must be positive, got {max_friction_torque!r}")
    lever = props.com - np.asarray(grasp_point, dtype=float)
    force = np.array([0.0, 0.0, -weight_newtons(props.mass)])
    moment = abs(float(np.cross(lever, force) @ axis))
    margin = max_friction_torque - moment
    return StabilityReport("pick", _verdict(margin, tolerance), moment, margin, "N*cm",
                           {"capacity_Ncm": max_friction_torque,
                            "lever_arm_cm": float(np.linalg.norm(np.cross(lever, axis)))})


def tip_over_check(props: MassProperties, support: SupportPolygon, tilt: Tilt | None = None,
                   tolerance: float = 1e-6) -> StabilityReport:
    """Whether the (tilted) CoM projects inside the support polygon.

    The margin is the signed ground-plane distance (cm) from the projected
    CoM to the hull boundary, positive inside.
    """
    com = props.com if tilt is None else tilt.apply(props.com)
    q = (float(com[0]), float(com[1]))
    margin = support.signed_distance(q)
    moment = weight_newtons(props.mass) * abs(margin)
    return StabilityReport("place", _verdict(margin, tolerance), moment, margin, "cm",
                           {"com_projection_cm": list(q), "hull": [list(p) for p in support.hull()]})


def push_moment_check(props: MassProperties, push_point, push_force: float, pivot_edge,
                      friction_coefficient: float, ground_z: float = 0.0,
                      tolerance: float = 1e-6) -> StabilityReport:
    """Quasi-static push: overturning ``F*h`` against restoring ``m*g*d`` about the pivot edge.

    The object tips only if the overturning moment wins *and* friction holds
    (``F <= mu_f * m * g``); otherwise it slides or stays put, which counts
    as stable.
    """
    if not push_force > 0:
        raise ValidationError(f"push force must be positive, got {push_force!r}")
    if not friction_coefficient >= 0:
        raise ValidationError("friction coefficient must be nonnegative")
    (ax, ay), (bx, by) = pivot_edge
    edge = np.array([bx - ax, by - ay], dtype=float)
    if not np.linalg.norm(edge) > 0:
        raise ValidationError("pivot edge needs two distinct points")
    height = float(push_point[2]) - ground_z
    if height < 0:
        raise ValidationError("push point lies below the ground plane")
    rel = np.array([props.com[0] - ax, props.com[1] - ay])
    d = abs(float(edge[0] * rel[1] - edge[1] * rel[0])) / float(np.linalg.norm(edge))
    weight = weight_newtons(props.mass)
    overturning = push_force * height
    restoring = weight * d
    slides = push_force > friction_coefficient * weight
    margin = restoring - overturning
    tips = overturning > restoring and not slides
    return StabilityReport("push", _verdict(margin, tolerance, failed=tips), overturning, margin,
                           "N*cm",
                           {"restoring_Ncm": restoring, "overturning_Ncm": overturning,
                            "pivot_distance_cm": d, "push_height_cm": height,
                            "slides": bool(slides), "tips": bool(tips),
                            "tipping_height_cm": restoring / push_force})
