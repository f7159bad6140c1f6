import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xden.errors import CoverageError, ValidationError
from xden.geometry import (BiplanarSetup, ProjectionGeometry, load_setup,
                           make_orthogonal_biplanar, project_points, ray_for_pixel, save_setup)


def parallel_xy(**kw):
    args = dict(kind="parallel", detector_origin=(0, 0, 0), u_axis=(1, 0, 0), v_axis=(0, 1, 0),
                pixel_pitch=0.1, width=4, height=3)
    args.update(kw)
    return ProjectionGeometry(**args)


def test_parallel_pixel_ray_is_detector_normal():
    geom = parallel_xy()
    ray = ray_for_pixel(geom, 0, 0)
    np.testing.assert_array_equal(ray.direction, [0, 0, 1])
    # origin sits on the line through the pixel center along the normal
    np.testing.assert_allclose(ray.origin + geom.standoff * ray.direction, [0, 0, 0], atol=1e-12)
    assert ray.origin[2] < 0


def test_cone_collinear_pixel():
    geom = ProjectionGeometry("cone", (0, 0, 0), (1, 0, 0), (0, 1, 0), 1.0, 5, 5,
                              source_position=(0, 0, -10))
    ray = ray_for_pixel(geom, 0, 0)
    np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-15)
    np.testing.assert_array_equal(ray.origin, [0, 0, -10])


def test_cone_oblique_pixel():
    geom = ProjectionGeometry("cone", (0, 0, 0), (1, 0, 0), (0, 1, 0), 1.0, 5, 5,
                              source_position=(0, 0, -10))
    ray = ray_for_pixel(geom, 3, 0)
    np.testing.assert_allclose(ray.direction, np.array([3, 0, 10]) / math.sqrt(109), atol=1e-15)


@pytest.mark.parametrize("px,py", [(-1, 0), (4, 0), (0, 3), (0, -1)])
def test_pixel_out_of_range(px, py):
    with pytest.raises(IndexError):
        ray_for_pixel(parallel_xy(), px, py)


@pytest.mark.parametrize("kind", ["parallel", "cone"])
def test_orthogonal_unit_cube(kind):
    setup = make_orthogonal_biplanar(((-0.5,) * 3, (0.5,) * 3), 256, 0.01, kind=kind)
    d0, d1 = setup.view0.principal_direction(), setup.view1.principal_direction()
    np.testing.assert_allclose(d0, [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(d1, [1, 0, 0], atol=1e-15)
    assert d0 @ d1 == 0


def test_degenerate_box_is_coverage_error():
    with pytest.raises(CoverageError):
        make_orthogonal_biplanar(((0, 0, 0), (0, 0, 0)), 64, 0.1)


def test_small_detector_names_required_extent():
    with pytest.raises(CoverageError, match=r"10\.5"):
        make_orthogonal_biplanar(((-5,) * 3, (5,) * 3), 128, 0.05, kind="parallel")


@pytest.mark.parametrize("kind", ["parallel", "cone"])
def test_box_corners_project_inside_both_detectors(kind):
    lo, hi = np.array([-1.0, -0.5, -2.0]), np.array([1.5, 0.5, 1.0])
    setup = make_orthogonal_biplanar((lo, hi), (96, 80), 0.06, kind=kind)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
    for g in setup.views:
        pix = project_points(g, corners)
        assert np.all(pix >= -0.5) and np.all(pix[:, 0] <= g.width - 0.5)
        assert np.all(pix[:, 1] <= g.height - 0.5)


axis_pairs = st.sampled_from([
    ((1, 0, 0), (0, 1, 0)), ((0, 1, 0), (0, 0, 1)), ((0, 0, 1), (1, 0, 0)),
    ((0, 1, 0), (1, 0, 0)),
])


@settings(max_examples=40, deadline=None)
@given(axes=axis_pairs, kind=st.sampled_from(["parallel", "cone"]),
       w=st.integers(1, 9), h=st.integers(1, 9), pitch=st.floats(0.01, 2.0),
       src=st.tuples(*[st.floats(-20, 20)] * 3))
def test_ray_directions_are_unit(axes, kind, w, h, pitch, src):
    u, v = axes
    normal = np.cross(u, v)
    source = np.array(src) - (abs(np.array(src) @ normal) + 1.0) * normal
    geom = ProjectionGeometry(kind, (0.3, -0.2, 0.1), u, v, pitch, w, h,
                              source_position=tuple(source) if kind == "cone" else None)
    _, dirs = geom.rays()
    assert np.max(np.abs(np.linalg.norm(dirs, axis=1) - 1)) < 1e-12
    for px in range(w):
        ray = ray_for_pixel(geom, px, h - 1)
        assert abs(np.linalg.norm(ray.direction) - 1) < 1e-12


def test_parallel_rays_are_parallel_and_cone_rays_share_source():
    setup = make_orthogonal_biplanar(((-1,) * 3, (1,) * 3), 16, 0.2, kind="parallel")
    _, dirs = setup.view0.rays()
    assert np.all(dirs == dirs[0])
    cone = make_orthogonal_biplanar(((-1,) * 3, (1,) * 3), 16, 0.3, kind="cone")
    for g in cone.views:
        origins, dirs = g.rays()
        assert np.all(origins == np.array(g.source_position))
        # every ray hits its own pixel center
        centers = g.pixel_center(*np.divmod(np.arange(g.n_pixels), g.width)[::-1])
        to_center = centers - origins
        cross = np.cross(dirs, to_center / np.linalg.norm(to_center, axis=1, keepdims=True))
        assert np.abs(cross).max() < 1e-12


@pytest.mark.parametrize("kw", [
    dict(u_axis=(1, 0, 0), v_axis=(1, 0, 0)),
    dict(u_axis=(2, 0, 0)),
    dict(pixel_pitch=0.0),
    dict(width=0),
    dict(i0=0.0),
    dict(kind="fan"),
    dict(kind="cone", source_position=(1.0, 2.0, 0.0)),
    dict(kind="cone"),
])
def test_invalid_geometries(kw):
    with pytest.raises(ValidationError):
        parallel_xy(**kw)


def test_non_orthogonal_views_rejected():
    g0 = parallel_xy()
    tilted = ProjectionGeometry("parallel", (0, 0, 0), (0, 1, 0),
                                (0, 0, 1), 0.1, 4, 3)
    BiplanarSetup(g0, tilted)
    with pytest.raises(ValidationError):
        BiplanarSetup(g0, parallel_xy(u_axis=(0, 1, 0), v_axis=(1, 0, 0)))
    with pytest.raises(ValidationError):
        BiplanarSetup(g0, ProjectionGeometry("parallel", (0, 0, 0), (0, 1, 0), (0, 0, 1),
                                             0.1, 4, 3, i0=2.0))


def test_setup_json_round_trip(tmp_path):
    setup = make_orthogonal_biplanar(((-1,) * 3, (1,) * 3), (20, 30), 0.2, kind="cone", i0=3.0)
    save_setup(setup, tmp_path / "g.json")
    back = load_setup(tmp_path / "g.json")
    assert back == setup
    doc = setup.view0.to_dict()
    assert doc["schema"] == "xden-geom/1"
    assert set(doc) >= {"kind", "source_position_cm", "detector_origin_cm", "u_axis", "v_axis",
                        "pixel_pitch_cm", "width", "height", "i0"}
    with pytest.raises(ValidationError):
        ProjectionGeometry.from_dict({**doc, "schema": "other/1"})
