import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xden.geometry import BiplanarSetup, ProjectionGeometry, make_orthogonal_biplanar
from xden.raytrace import PathLengthMatrix, build_path_matrix
from xden.volume import PhantomPart, PhantomSpec, make_phantom


def single_pixel_matrix(lengths0, lengths1, i0=1.0):
    """1x1 detectors looking along +z and +x with hand-set region lengths."""
    g0 = ProjectionGeometry("parallel", (0, 0, 0), (1, 0, 0), (0, 1, 0), 1.0, 1, 1, i0=i0)
    g1 = ProjectionGeometry("parallel", (0, 0, 0), (0, 1, 0), (0, 0, 1), 1.0, 1, 1, i0=i0)
    rows = [np.asarray(lengths0, dtype=float)[None, :], np.asarray(lengths1, dtype=float)[None, :]]
    names = ("air",) + tuple(f"r{k}" for k in range(1, len(lengths0)))
    return PathLengthMatrix(BiplanarSetup(g0, g1), (rows[0], rows[1]), names)


def water_aluminum_spec(resolution=48, size=6.0):
    return PhantomSpec(size=size, resolution=resolution, parts=(
        PhantomPart("sphere", radius=1.8, material="Water", name="core"),
        PhantomPart("sphere", radius=2.4, inner_radius=1.8, material="Aluminum", name="shell"),
    ))


@pytest.fixture(scope="session")
def water_aluminum():
    vol, mu = make_phantom(water_aluminum_spec())
    setup = make_orthogonal_biplanar(vol.bounds, 48, 0.15, kind="parallel")
    return vol, mu, build_path_matrix(vol, setup)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
