"""Least-squares fit of per-region LACs to two measured views, and LAC -> density.

The forward model per pixel is ``I = i0 * exp(-sum_k mu_k l_k)``, so the
intensity-domain derivative is simply ``dI/dmu_k = -l_k * I``. The fit uses
Adam on that closed-form gradient, clamping LACs at zero after every step.

All reductions over pixels go through :func:`tree_sum` (pairwise summation
along a contiguous axis), so results do not depend on thread count.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DegenerateError, NumericalError, SaturationError, ShapeError,
                     ValidationError)
from .materials import AIR, UNIVERSAL_MAC, classify_by_lac
from .volume import LabelVolume, read_grid_header, read_raw, sidecar_paths
from .xray import AIR_LAC, AttenuationVector, XRayImage, to_projection

RECON_SCHEMA = "xden-recon/1"
DVOL_SCHEMA = "xden-dvol/1"

INTENSITY = "intensity"
PROJECTION = "projection"

#: Regions with less total path length than this (cm, both views) cannot be fitted.
IDENTIFIABILITY_THRESHOLD = 1e-9


@dataclass(frozen=True)
class ReconConfig:
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_iterations: int = 10000
    rel_tolerance: float = 1e-8
    patience: int = 50
    # objective at or below this counts as an exact fit
    abs_tolerance: float = 1e-20
    init_mu: float = 0.17
    loss_domain: str = INTENSITY
    nonnegativity: str = "clamp"
    # reject steps that raise the objective: restore, restart the moments, halve the rate
    monotone: bool = True
    air_fixed: bool = True

    def __post_init__(self):
        for name in ("learning_rate", "adam_epsilon", "rel_tolerance", "init_mu"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not self.abs_tolerance >= 0:
            raise ValidationError("abs_tolerance must be nonnegative")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if self.max_iterations < 1 or self.patience < 1:
            raise ValidationError("max_iterations and patience must be >= 1")
        if self.loss_domain not in (INTENSITY, PROJECTION):
            raise ValidationError(f"loss_domain must be 'intensity' or 'projection'")
        if self.nonnegativity not in ("clamp", "none"):
            raise ValidationError("nonnegativity must be 'clamp' or 'none'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ReconConfig":
        known = cls.__dataclass_fields__
        unknown = set(doc) - set(known) - {"schema"}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**{k: v for k, v in doc.items() if k in known})
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc


def tree_sum(x: np.ndarray, axis: int = -1):
    """Pairwise sum along a contiguous axis; the order depends only on the length."""
    return np.add.reduce(np.ascontiguousarray(x), axis=axis)


class Adam:
    """Adam with bias correction, stepping a flat parameter vector in place."""

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = None
        self.v = None
        self.t = 0

    def reset(self) -> None:
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


class _Problem:
    """Fitting problem restricted to the free parameters and the pixels they touch.

    Pixels whose rays cross only fixed regions contribute a constant to the
    objective and nothing to the gradient; they are folded into ``const``.
    """

    def __init__(self, matrix, measured, domain, air_fixed, free):
        if len(measured) != 2:
            raise ShapeError("need exactly two measured views")
        self.domain = domain
        self.free = np.asarray(free, dtype=np.int64)
        self.views = []
        self.const = 0.0
        for view, img in enumerate(measured):
            geom = matrix.setup.views[view]
            if (img.width, img.height) != (geom.width, geom.height):
                raise ShapeError(f"view {view} image is {img.width}x{img.height} but the "
                                 f"detector is {geom.width}x{geom.height}")
            table = matrix.lengths[view]
            target = img.intensities.ravel()
            if domain == PROJECTION:
                try:
                    target = to_projection(img).ravel()
                except SaturationError as exc:
                    raise SaturationError(f"view {view}: {exc}", exc.pixel, view) from exc
            lf = table[:, self.free]
            active = np.any(lf > 0, axis=1)
            # fixed air contributes a constant line integral per pixel
            offset = table[:, 0] * AIR_LAC if air_fixed else np.zeros(len(table))
            if not active.all():
                idle = self._model(offset[~active], np.zeros((np.count_nonzero(~active), 0)),
                                   np.zeros(0), geom.i0)
                self.const += float(tree_sum((idle - target[~active]) ** 2))
            lf_t = np.ascontiguousarray(lf[active].T)  # (n_free, n_active)
            self.views.append((lf_t, offset[active], target[active], geom.i0))

    def _model(self, offset, lf_t, x, i0):
        s = offset.copy()
        for k in range(len(x)):
            s += x[k] * lf_t[k]
        if self.domain == PROJECTION:
            return s
        return i0 * np.exp(-s)

    def objective(self, x) -> float:
        total = self.const
        for lf_t, offset, target, i0 in self.views:
            r = self._model(offset, lf_t, x, i0) - target
            total += float(tree_sum(r * r))
        return total

    def objective_and_gradient(self, x):
        total = self.const
        grad = np.zeros(len(x))
        for lf_t, offset, target, i0 in self.views:
            model = self._model(offset, lf_t, x, i0)
            r = model - target
            total += float(tree_sum(r * r))
            if self.domain == PROJECTION:
                w = 2.0 * r
            else:
                w = -2.0 * r * model
            grad += tree_sum(lf_t * w, axis=1)
        return total, grad


def _free_indices(mu: AttenuationVector, matrix) -> list[int]:
    start = 1 if mu.air_fixed else 0
    return list(range(start, matrix.n_regions + 1))


def _check_mu(mu: AttenuationVector, matrix):
    if len(mu.mu) != matrix.n_regions + 1:
        raise ShapeError(f"attenuation vector has {len(mu.mu)} entries, volume has "
                         f"{matrix.n_regions + 1} regions")


def objective(mu: AttenuationVector, matrix, measured, domain: str = INTENSITY) -> float:
    """Sum of squared residuals over both views, in the intensity or projection domain."""
    _check_mu(mu, matrix)
    free = _free_indices(mu, matrix)
    prob = _Problem(matrix, measured, domain, mu.air_fixed, free)
    return prob.objective(mu.mu[free])


def gradient(mu: AttenuationVector, matrix, measured, domain: str = INTENSITY) -> np.ndarray:
    """Analytic gradient over the free LACs (regions 1..K, plus air first if not fixed)."""
    _check_mu(mu, matrix)
    free = _free_indices(mu, matrix)
    prob = _Problem(matrix, measured, domain, mu.air_fixed, free)
    return prob.objective_and_gradient(mu.mu[free])[1]


@dataclass
class ReconResult:
    mu: AttenuationVector
    final_objective: float
    iterations: int
    identifiable: np.ndarray
    trace: list[float]
    converged: bool
    region_names: tuple[str, ...]
    config: ReconConfig
    provenance: str = ""
    advisories: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        regions = []
        for k, name in enumerate(self.region_names):
            m = float(self.mu.mu[k])
            if k == 0:
                rho, guess = AIR.density, AIR.name
            elif math.isnan(m):
                rho, guess = None, None
            else:
                rho, guess = lac_to_density(m), classify_by_lac(m)[0].name
            regions.append({"id": k, "name": name, "mu_cm_inv": None if math.isnan(m) else m,
                            "rho_g_cm3": rho, "identifiable": bool(self.identifiable[k]),
                            "material_guess": guess})
        return {
            "schema": RECON_SCHEMA,
            "regions": regions,
            "final_objective": self.final_objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "provenance": self.provenance,
            "advisories": list(self.advisories),
            "config_echo": self.config.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ReconResult":
        if doc.get("schema") != RECON_SCHEMA:
            raise ValidationError(f"expected schema {RECON_SCHEMA!r}")
        try:
            regions = sorted(doc["regions"], key=lambda r: r["id"])
            mu = np.array([np.nan if r["mu_cm_inv"] is None else r["mu_cm_inv"] for r in regions])
            config = ReconConfig.from_dict(doc.get("config_echo", {}))
            return cls(
                mu=AttenuationVector(mu, air_fixed=config.air_fixed),
                final_objective=float(doc["final_objective"]),
                iterations=int(doc["iterations"]),
                identifiable=np.array([bool(r["identifiable"]) for r in regions]),
                trace=[],
                converged=bool(doc.get("converged", True)),
                region_names=tuple(r["name"] for r in regions),
                config=config,
                provenance=str(doc.get("provenance", "")),
                advisories=list(doc.get("advisories", [])),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed reconstruction result ({exc})") from exc


def load_result(path) -> ReconResult:
    try:
        return ReconResult.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError as exc:
        raise ValidationError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def reconstruct(matrix, measured, config: ReconConfig | None = None) -> ReconResult:
    """Fit the LAC of every identifiable region to the two measured views."""
    config = config or ReconConfig()
    n = matrix.n_regions + 1
    totals = matrix.total_lengths()
    identifiable = totals >= IDENTIFIABILITY_THRESHOLD
    first = 1 if config.air_fixed else 0
    if config.air_fixed:
        identifiable[0] = True
    free = [k for k in range(first, n) if identifiable[k]]
    advisories = [f"region {k} ({matrix.region_names[k]!r}) has no path length in either "
                  f"view; its LAC is unidentifiable" for k in range(1, n) if not identifiable[k]]
    if not free:
        raise DegenerateError("no region is identifiable: every part has zero path length "
                              "in both views" if n > 1 else "volume contains only air")

    prob = _Problem(matrix, measured, config.loss_domain, config.air_fixed, free)
    x = np.full(len(free), float(config.init_mu))
    if not config.air_fixed:
        x[0] = AIR_LAC
    adam = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)

    f, g = prob.objective_and_gradient(x)
    trace = [f]
    converged = f <= config.abs_tolerance or not np.any(g)
    quiet = 0
    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while not converged and it < config.max_iterations:
            it += 1
            x_prev = x.copy()
            adam.step(x, g)
            if config.nonnegativity == "clamp":
                np.maximum(x, 0.0, out=x)
            f_new, g_new = prob.objective_and_gradient(x)
            if not math.isfinite(f_new):
                raise NumericalError(f"objective became {f_new} at iteration {it}",
                                     iteration=it)
            if config.monotone and f_new > f:
                # overshoot: a fresh Adam step is sign-like, hence a descent direction
                x = x_prev
                adam.reset()
                adam.lr *= 0.5
                f_new, g_new = f, g
            trace.append(f_new)
            rel = abs(f - f_new) / max(abs(f), np.finfo(float).tiny)
            quiet = quiet + 1 if rel < config.rel_tolerance else 0
            f, g = f_new, g_new
            converged = f <= config.abs_tolerance or quiet >= config.patience or not np.any(g)
    if f > config.abs_tolerance and not np.any(g):
        advisories.append("stopped on a vanishing gradient; the model may be saturated")
    mu = np.full(n, np.nan)
    if config.air_fixed:
        mu[0] = AIR_LAC
    mu[free] = x
    return ReconResult(
        mu=AttenuationVector(mu, air_fixed=config.air_fixed),
        final_objective=float(f),
        iterations=it,
        identifiable=identifiable,
        trace=trace,
        converged=bool(converged),
        region_names=tuple(matrix.region_names),
        config=config,
        provenance=matrix.provenance,
        advisories=advisories,
    )


def lac_to_density(mu_k: float, mac: float = UNIVERSAL_MAC) -> float:
    """Density (g/cm^3) from a LAC (cm^-1) and a mass attenuation coefficient (cm^2/g)."""
    if not mac > 0:
        raise ValidationError(f"mass attenuation coefficient must be positive, got {mac!r}")
    if not mu_k >= 0:
        raise ValidationError(f"LAC must be nonnegative, got {mu_k!r}")
    return mu_k / mac


@dataclass(frozen=True, eq=False)
class DensityField:
    rho: np.ndarray  # (nx, ny, nz) g/cm^3; NaN marks unknown voxels
    voxel_size: float
    origin: tuple[float, float, float]

    def __post_init__(self):
        rho = np.array(self.rho, dtype=np.float64)
        if rho.ndim != 3 or min(rho.shape) < 1:
            raise ValidationError(f"density grid must be 3-D, got shape {rho.shape}")
        if np.any(rho < 0) or np.any(np.isinf(rho)):
            raise ValidationError("densities must be finite and nonnegative (or NaN)")
        if not self.voxel_size > 0:
            raise ValidationError("voxel_size must be positive")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.rho.shape)


def region_densities(result: ReconResult, mac_mode: str = "universal",
                     region_names=None) -> np.ndarray:
    """Density (g/cm^3) per region id; air gets the tabulated air density, unknowns NaN."""
    if mac_mode not in ("universal", "per_material"):
        raise ValidationError("mac_mode must be 'universal' or 'per_material'")
    names = region_names or result.region_names
    rho_k = np.empty(len(result.mu.mu))
    rho_k[0] = AIR.density
    for k in range(1, len(rho_k)):
        m = result.mu.mu[k]
        if math.isnan(m) or not result.identifiable[k]:
            rho_k[k] = np.nan
            note = f"region {k} ({names[k]!r}) has unknown density (NaN voxels)"
            if note not in result.advisories:
                result.advisories.append(note)
        elif mac_mode == "universal":
            rho_k[k] = lac_to_density(m)
        else:
            rho_k[k] = lac_to_density(m, classify_by_lac(m)[0].mac)
    return rho_k


def build_density_field(vol: LabelVolume, result: ReconResult,
                        mac_mode: str = "universal") -> DensityField:
    """Paint each region's density into its voxels."""
    if len(result.mu.mu) != len(vol.regions):
        raise ShapeError(f"result has {len(result.mu.mu)} regions, volume has {len(vol.regions)}")
    rho_k = region_densities(result, mac_mode, vol.region_names())
    return DensityField(rho_k[vol.labels], vol.voxel_size, vol.origin)


def save_density(field_: DensityField, path) -> tuple[Path, Path]:
    json_path, raw_path = sidecar_paths(path, ".dvol")
    header = {"schema": DVOL_SCHEMA, "dims": list(field_.dims), "voxel_size_cm": field_.voxel_size,
              "origin_cm": list(field_.origin), "dtype": "f32le", "order": "x-fastest"}
    json_path.write_text(json.dumps(header, indent=2) + "\n")
    raw_path.write_bytes(field_.rho.astype("<f4").tobytes(order="F"))
    return json_path, raw_path


def load_density(path) -> DensityField:
    json_path, raw_path = sidecar_paths(path, ".dvol")
    header, dims = read_grid_header(json_path, DVOL_SCHEMA, "f32le")
    rho = read_raw(raw_path, "<f4", dims).astype(np.float64)
    try:
        return DensityField(rho, float(header["voxel_size_cm"]), tuple(header["origin_cm"]))
    except KeyError as exc:
        raise ValidationError(f"{json_path}: missing field {exc}") from exc
