"""Monoenergetic Beer-Lambert forward model and X-ray image I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SaturationError, ShapeError, ValidationError
from .materials import AIR

XRI_SCHEMA = "xden-xri/1"

#: LAC of air (cm^-1), held fixed during reconstruction.
AIR_LAC = AIR.lac


@dataclass(frozen=True, eq=False)
class AttenuationVector:
    """LACs (cm^-1) indexed by region id; index 0 is air.

    NaN entries mark regions whose value is unknown (unidentifiable).
    """

    mu: np.ndarray
    air_fixed: bool = True
    energy_keV: float = 100.0

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        if mu.size < 1:
            raise ValidationError("attenuation vector needs at least the air entry")
        if not np.all((mu >= 0) | np.isnan(mu)) or np.any(np.isinf(mu)):
            raise ValidationError(f"LACs must be finite and nonnegative, got {mu.tolist()}")
        if self.air_fixed and mu[0] != AIR_LAC:
            raise ValidationError(f"air entry must be {AIR_LAC} cm^-1 while air is fixed")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def with_air(cls, region_mus, **kwargs) -> "AttenuationVector":
        """Fixed-air vector from the K non-air LACs."""
        return cls(np.concatenate([[AIR_LAC], np.asarray(region_mus, dtype=float)]), **kwargs)

    @property
    def n_regions(self) -> int:
        return len(self.mu) - 1

    def scaled(self, factor: float) -> "AttenuationVector":
        return AttenuationVector(self.mu * factor, air_fixed=False, energy_keV=self.energy_keV)

    def to_dict(self) -> dict:
        return {"mu_cm_inv": [None if np.isnan(m) else float(m) for m in self.mu],
                "air_fixed": self.air_fixed, "energy_keV": self.energy_keV}

    @classmethod
    def from_dict(cls, doc: dict) -> "AttenuationVector":
        try:
            mu = [np.nan if m is None else float(m) for m in doc["mu_cm_inv"]]
            return cls(np.array(mu), air_fixed=bool(doc.get("air_fixed", True)),
                       energy_keV=float(doc.get("energy_keV", 100.0)))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed attenuation vector document ({exc})") from exc


def save_mu(mu: AttenuationVector, path, region_names=None) -> None:
    doc = {"schema": "xden-mu/1", **mu.to_dict()}
    if region_names is not None:
        doc["regions"] = list(region_names)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_mu(path) -> AttenuationVector:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    return AttenuationVector.from_dict(doc)


@dataclass(frozen=True, eq=False)
class XRayImage:
    """Detector intensities, ``intensities[py, px]`` (row-major)."""

    intensities: np.ndarray
    i0: float = 1.0
    pixel_pitch: float = 1.0

    def __post_init__(self):
        arr = np.array(self.intensities, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError(f"image must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValidationError("image intensities must be finite and nonnegative")
        if not self.i0 > 0 or not self.pixel_pitch > 0:
            raise ValidationError("i0 and pixel_pitch must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "intensities", arr)

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    def with_intensities(self, values) -> "XRayImage":
        return XRayImage(values, self.i0, self.pixel_pitch)


def simulate_pixel(lengths, mu: AttenuationVector, i0: float = 1.0) -> float:
    """``i0 * exp(-sum_k mu_k * l_k)`` for one ray's region lengths."""
    total = 0.0
    for region, length in lengths:
        if not 0 <= region < len(mu.mu):
            raise IndexError(f"region {region} has no LAC (vector covers 0..{len(mu.mu) - 1})")
        total += mu.mu[region] * length
    return float(i0 * np.exp(-total))


def line_integrals(matrix, mu: AttenuationVector) -> tuple[np.ndarray, np.ndarray]:
    """``sum_k mu_k l_k`` per pixel for both views, each shaped ``(height, width)``."""
    if len(mu.mu) != matrix.n_regions + 1:
        raise ShapeError(f"attenuation vector has {len(mu.mu)} entries but the volume has "
                         f"{matrix.n_regions + 1} regions")
    if np.any(np.isnan(mu.mu)):
        raise ValidationError("cannot render with unknown (NaN) LACs")
    out = []
    for view in (0, 1):
        w, h = matrix.shape(view)
        table = matrix.lengths[view]
        # fixed accumulation order over regions so results never depend on BLAS threading
        acc = np.zeros(table.shape[0])
        for k in range(table.shape[1]):
            acc += table[:, k] * mu.mu[k]
        out.append(acc.reshape(h, w))
    return out[0], out[1]


def render(matrix, mu: AttenuationVector) -> tuple[XRayImage, XRayImage]:
    images = []
    for geom, p in zip(matrix.setup.views, line_integrals(matrix, mu)):
        images.append(XRayImage(geom.i0 * np.exp(-p), geom.i0, geom.pixel_pitch))
    return images[0], images[1]


def to_projection(img: XRayImage) -> np.ndarray:
    """Negative log transmission ``-ln(I / i0)`` per pixel."""
    bad = np.flatnonzero(img.intensities.ravel() <= 0)
    if bad.size:
        py, px = divmod(int(bad[0]), img.width)
        raise SaturationError(
            f"pixel ({px}, {py}) has intensity {float(img.intensities[py, px])!r}; "
            f"log projection undefined ({bad.size} saturated pixels)", pixel=(px, py))
    return -np.log(img.intensities / img.i0)


def add_poisson_noise(img: XRayImage, photons_per_unit_intensity: float, seed: int) -> XRayImage:
    """Replace each pixel by ``Poisson(I * n) / n`` from a seeded generator."""
    n = photons_per_unit_intensity
    if not n > 0:
        raise ValidationError(f"photons_per_unit_intensity must be positive, got {n!r}")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(img.intensities * n)
    return img.with_intensities(counts / n)


def save_image(img: XRayImage, path) -> tuple[Path, Path]:
    from .volume import sidecar_paths

    json_path, raw_path = sidecar_paths(path, ".xri")
    header = {"schema": XRI_SCHEMA, "width": img.width, "height": img.height,
              "pixel_pitch_cm": img.pixel_pitch, "i0": img.i0,
              "dtype": "f32le", "order": "row-major"}
    json_path.write_text(json.dumps(header, indent=2) + "\n")
    raw_path.write_bytes(img.intensities.astype("<f4").tobytes(order="C"))
    return json_path, raw_path


def load_image(path) -> XRayImage:
    from .volume import _read_header, read_raw, sidecar_paths

    json_path, raw_path = sidecar_paths(path, ".xri")
    header = _read_header(json_path, XRI_SCHEMA)
    try:
        w, h = int(header["width"]), int(header["height"])
        if w < 1 or h < 1:
            raise ValidationError(f"{json_path}: image dims must be >= 1")
        if header.get("dtype") != "f32le" or header.get("order") != "row-major":
            raise ValidationError(f"{json_path}: expected f32le row-major payload")
        values = read_raw(raw_path, "<f4", (w * h,)).reshape(h, w)
        return XRayImage(values.astype(np.float64), float(header["i0"]),
                         float(header["pixel_pitch_cm"]))
    except KeyError as exc:
        raise ValidationError(f"{json_path}: missing field {exc}") from exc
