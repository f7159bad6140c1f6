"""Density-field and projection fit metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, ShapeError, ValidationError
from .recon import DensityField, tree_sum
from .volume import LabelVolume, check_same_grid
from .xray import XRayImage


def region_mask(vol: LabelVolume, regions=None) -> np.ndarray:
    """Voxels belonging to ``regions`` (default: every non-air region)."""
    if regions is None:
        return vol.labels != 0
    return np.isin(vol.labels, np.asarray(list(regions), dtype=vol.labels.dtype))


@dataclass
class MapeReport:
    mape: float
    masked_voxels: int
    excluded_voxels: int
    per_region: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mape": self.mape, "masked_voxels": self.masked_voxels,
                "excluded_voxels": self.excluded_voxels,
                "per_region": {str(k): v for k, v in self.per_region.items()}}


def _ape(pred: DensityField, ref: DensityField, mask):
    check_same_grid(pred, ref, "density fields")
    if mask is None:
        mask = np.ones(ref.dims, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != ref.dims:
        raise ShapeError(f"mask shape {mask.shape} does not match the field {ref.dims}")
    unknown = mask & (np.isnan(pred.rho) | np.isnan(ref.rho))
    use = mask & ~unknown
    bad = np.count_nonzero(ref.rho[use] <= 0)
    if bad:
        raise ValidationError(f"reference density is zero or negative in {bad} masked voxels; "
                              "percentage error undefined there")
    ape = np.abs(pred.rho - ref.rho) / np.where(use, ref.rho, 1.0)
    return ape, use, int(np.count_nonzero(unknown))


def voxel_mape(pred: DensityField, ref: DensityField, mask=None) -> float:
    """Mean of ``|pred - ref| / ref`` over masked voxels; NaN voxels are skipped."""
    return mape_report(pred, ref, mask).mape


def mape_report(pred: DensityField, ref: DensityField, mask=None,
                labels: LabelVolume | None = None) -> MapeReport:
    """MAPE plus voxel counts; with ``labels``, also a per-region breakdown.

    When ``mask`` is omitted and ``labels`` is given, the mask is every
    non-air voxel.
    """
    if mask is None and labels is not None:
        mask = region_mask(labels)
    ape, use, excluded = _ape(pred, ref, mask)
    n = int(np.count_nonzero(use))
    if n == 0:
        raise DegenerateError("no voxels left to evaluate after masking")
    report = MapeReport(float(tree_sum(ape[use]) / n), n, excluded)
    if labels is not None:
        for region in labels.regions:
            sel = use & (labels.labels == region.id)
            count = int(np.count_nonzero(sel))
            if count:
                report.per_region[region.id] = float(tree_sum(ape[sel]) / count)
    return report


def projection_rmse(a: XRayImage, b: XRayImage) -> float:
    if a.intensities.shape != b.intensities.shape:
        raise ShapeError(f"images differ in size: {a.width}x{a.height} vs {b.width}x{b.height}")
    d = (a.intensities - b.intensities).ravel()
    return float(np.sqrt(tree_sum(d * d) / d.size))
