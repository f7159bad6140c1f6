"""Reference materials at 100 keV and conversions between LAC, MAC and density."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import MaterialLookupError, ValidationError

#: Mass attenuation coefficient shared by most light materials at 100 keV (cm^2/g).
UNIVERSAL_MAC = 0.17


@dataclass(frozen=True)
class Material:
    name: str
    formula: str
    mac: float  # cm^2/g
    density: float  # g/cm^3
    lac: float  # cm^-1


_TABLE = (
    Material("Water", "H2O", 0.17, 1.00, 0.17),
    Material("Air", "N2, O2", 0.15, 0.0012, 1.8e-4),
    Material("Glass", "SiO2", 0.18, 2.40, 0.432),
    Material("Plastic-PP", "(C3H6)n", 0.18, 0.90, 0.16),
    Material("Plastic-PVC", "(C2H3Cl)n", 0.18, 1.40, 0.25),
    Material("Rubber", "(C5H8)n", 0.19, 1.20, 0.22),
    Material("Wood", "C6H10O5", 0.16, 0.80, 0.12),
    Material("Aluminum", "Al", 0.19, 2.70, 0.51),
)

AIR = _TABLE[1]
WATER = _TABLE[0]


def builtin_table() -> tuple[Material, ...]:
    return _TABLE


def _normalize(name: str) -> str:
    return "".join(ch for ch in name.lower() if ch.isalnum())


def lookup(name: str, extra: tuple[Material, ...] | list[Material] = ()) -> Material:
    """Find a material by name, ignoring case and punctuation.

    ``"Plastic (PP)"``, ``"plastic-pp"`` and ``"PlasticPP"`` all resolve to the
    same row. User-supplied ``extra`` materials shadow built-in ones.
    """
    key = _normalize(name)
    for mat in (*extra, *_TABLE):
        if _normalize(mat.name) == key:
            return mat
    raise MaterialLookupError(f"unknown material {name!r}")


def classify_by_lac(mu: float, table=None) -> tuple[Material, float]:
    """Nearest material by relative LAC distance ``|mu - lac| / lac``.

    Ties go to the smaller absolute distance, then to the earlier row, so
    ``mu = 0`` (equally far from everything in relative terms) maps to air.
    """
    if not mu >= 0:
        raise ValidationError(f"LAC must be nonnegative, got {mu}")
    rows = _TABLE if table is None else tuple(table)
    scored = [(abs(mu - m.lac) / max(m.lac, 1e-6), abs(mu - m.lac), i) for i, m in enumerate(rows)]
    rel, _, best = min(scored)
    return rows[best], rel


def load_materials(path) -> list[Material]:
    """Read extra materials from a JSON list with the same fields as `Material`."""
    try:
        rows = json.loads(Path(path).read_text())
        out = []
        for row in rows:
            lac = row.get("lac", row["mac"] * row["density"])
            out.append(Material(str(row["name"]), str(row.get("formula", "")),
                                float(row["mac"]), float(row["density"]), float(lac)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed material list ({exc})") from exc
    return out


def material_to_dict(mat: Material) -> dict:
    return asdict(mat)
