import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import single_pixel_matrix
from xden.errors import SaturationError, ShapeError, ValidationError
from xden.geometry import make_orthogonal_biplanar, ray_for_pixel
from xden.raytrace import build_path_matrix, trace_region_lengths
from xden.volume import LabelVolume, PhantomPart, PhantomSpec, Region, make_phantom
from xden.xray import (AIR_LAC, AttenuationVector, XRayImage, add_poisson_noise, line_integrals,
                       load_image, load_mu, render, save_image, save_mu, simulate_pixel,
                       to_projection)


def test_simulate_pixel_examples():
    mu = AttenuationVector.with_air([0.17, 0.51])
    assert simulate_pixel([], mu, 1.0) == 1.0
    assert simulate_pixel([(1, 1.0)], mu, 1.0) == pytest.approx(0.843665, abs=1e-6)
    assert simulate_pixel([(1, 1.0)], mu, 1.0) == pytest.approx(math.exp(-0.17), rel=1e-15)
    assert simulate_pixel([(1, 1.0), (2, 1.0)], mu, 2.0) == pytest.approx(2 * math.exp(-0.68),
                                                                         rel=1e-15)
    with pytest.raises(IndexError):
        simulate_pixel([(3, 1.0)], mu)


def test_attenuation_vector_invariants(tmp_path):
    with pytest.raises(ValidationError):
        AttenuationVector([AIR_LAC, -0.1])
    with pytest.raises(ValidationError):
        AttenuationVector([0.0, 0.1])
    free = AttenuationVector([0.0, 0.1], air_fixed=False)
    assert free.n_regions == 1
    mu = AttenuationVector.with_air([0.17, np.nan])
    save_mu(mu, tmp_path / "mu.json", ["air", "a", "b"])
    back = load_mu(tmp_path / "mu.json")
    np.testing.assert_array_equal(back.mu, mu.mu)


@pytest.fixture(scope="module")
def water_sphere():
    spec = PhantomSpec(size=6.0, resolution=48,
                       parts=(PhantomPart("sphere", radius=2.0, material="Water"),))
    vol, mu = make_phantom(spec)
    setup = make_orthogonal_biplanar(vol.bounds, 33, 0.25, kind="cone")
    return vol, mu, setup, build_path_matrix(vol, setup)


def test_all_air_render():
    vol = LabelVolume(np.zeros((6, 6, 6)), 0.5, (-1.5,) * 3, (Region(0, "air"),))
    setup = make_orthogonal_biplanar(vol.bounds, 8, 0.75, kind="parallel")
    m = build_path_matrix(vol, setup)
    a, b = render(m, AttenuationVector.with_air([]))
    for img, table in zip((a, b), m.lengths):
        np.testing.assert_allclose(img.intensities.ravel(), np.exp(-AIR_LAC * table[:, 0]),
                                   rtol=1e-15)
        assert np.all(img.intensities <= 1.0) and np.all(img.intensities > 0.99)


def test_zero_mu_renders_i0(water_sphere):
    vol, _, setup, m = water_sphere
    a, b = render(m, AttenuationVector(np.zeros(2), air_fixed=False))
    assert np.all(a.intensities == setup.view0.i0) and np.all(b.intensities == setup.view1.i0)


def test_water_sphere_center_pixel(water_sphere):
    vol, mu, setup, m = water_sphere
    a, _ = render(m, mu)
    c = 33 // 2
    rl = trace_region_lengths(vol, ray_for_pixel(setup.view0, c, c))
    expected = math.exp(-(0.17 * rl.as_dict()[1] + AIR_LAC * rl.as_dict().get(0, 0.0)))
    assert a.intensities[c, c] == pytest.approx(expected, rel=1e-12)
    assert rl.as_dict()[1] == pytest.approx(4.0, abs=0.3)


def test_k_mismatch(water_sphere):
    *_, m = water_sphere
    with pytest.raises(ShapeError):
        render(m, AttenuationVector.with_air([0.17, 0.2]))


def test_to_projection_examples():
    img = XRayImage(np.full((3, 4), 2.5), 2.5, 0.1)
    assert np.all(to_projection(img) == 0.0)
    img = XRayImage(np.full((2, 2), 1.3 * math.exp(-0.17)), 1.3, 0.1)
    np.testing.assert_allclose(to_projection(img), 0.17, rtol=1e-14)


def test_saturation_names_first_pixel():
    values = np.ones((3, 5))
    values[1, 3] = 0.0
    values[2, 0] = 0.0
    with pytest.raises(SaturationError, match=r"pixel \(3, 1\)") as info:
        to_projection(XRayImage(values, 1.0, 0.1))
    assert info.value.pixel == (3, 1)


def test_image_invariants():
    with pytest.raises(ValidationError):
        XRayImage(np.array([[1.0, -0.1]]), 1.0, 0.1)
    with pytest.raises(ValidationError):
        XRayImage(np.array([[1.0, np.inf]]), 1.0, 0.1)
    with pytest.raises(ValidationError):
        XRayImage(np.ones((2, 2)), 0.0, 0.1)


def test_inversion_and_multiplicativity(water_sphere):
    vol, mu, setup, m = water_sphere
    imgs = render(m, mu)
    doubled = render(m, mu.scaled(2.0))
    for img, p_ref, img2 in zip(imgs, line_integrals(m, mu), doubled):
        np.testing.assert_allclose(to_projection(img), p_ref, rtol=0, atol=1e-10)
        np.testing.assert_allclose(img2.intensities, img.intensities ** 2 / img.i0, rtol=1e-9)


def test_monotonicity(water_sphere):
    vol, mu, setup, m = water_sphere
    base = render(m, mu)
    more = render(m, AttenuationVector.with_air([0.18]))
    for b, x, table in zip(base, more, m.lengths):
        hit = (table[:, 1] > 0).reshape(b.intensities.shape)
        assert np.all(x.intensities[hit] < b.intensities[hit])
        np.testing.assert_array_equal(x.intensities[~hit], b.intensities[~hit])


def test_render_is_deterministic(water_sphere):
    *_, m = water_sphere
    mu = AttenuationVector.with_air([0.3])
    a = render(m, mu)
    b = render(m, mu)
    assert all(x.intensities.tobytes() == y.intensities.tobytes() for x, y in zip(a, b))


def test_poisson_statistics():
    img = XRayImage(np.full((100, 100), 0.5), 1.0, 0.1)
    noisy = add_poisson_noise(img, 2e6, seed=3)  # I * n = 1e6
    ratio = noisy.intensities.std() / noisy.intensities.mean()
    assert 0.0008 <= ratio <= 0.0012


def test_poisson_determinism_and_zero():
    values = np.linspace(0, 1, 64).reshape(8, 8)
    img = XRayImage(values, 1.0, 0.1)
    a = add_poisson_noise(img, 1e4, seed=11)
    b = add_poisson_noise(img, 1e4, seed=11)
    assert a.intensities.tobytes() == b.intensities.tobytes()
    assert a.intensities[0, 0] == 0.0
    assert add_poisson_noise(img, 1e4, seed=12).intensities.tobytes() != a.intensities.tobytes()


@pytest.mark.parametrize("n", [0, -5, float("nan")])
def test_poisson_needs_positive_rate(n):
    with pytest.raises(ValidationError):
        add_poisson_noise(XRayImage(np.ones((2, 2)), 1.0, 0.1), n, seed=0)


def test_single_pixel_render():
    m = single_pixel_matrix([0.0, 1.0, 1.0], [0.5, 2.0, 0.0], i0=2.0)
    a, b = render(m, AttenuationVector.with_air([0.17, 0.51]))
    assert a.intensities[0, 0] == pytest.approx(2 * math.exp(-0.68), rel=1e-15)
    assert b.intensities[0, 0] == pytest.approx(2 * math.exp(-0.34 - 0.5 * AIR_LAC), rel=1e-15)


def test_image_round_trip(tmp_path, rng):
    img = XRayImage(rng.random((7, 9)), 1.5, 0.05)
    json_path, raw_path = save_image(img, tmp_path / "v0")
    assert json_path.name == "v0.xri.json" and raw_path.stat().st_size == 7 * 9 * 4
    back = load_image(tmp_path / "v0.xri")
    assert (back.width, back.height, back.i0, back.pixel_pitch) == (9, 7, 1.5, 0.05)
    np.testing.assert_array_equal(back.intensities, img.intensities.astype(np.float32))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1.0), min_size=1, max_size=4),
       st.lists(st.floats(0, 5.0), min_size=5, max_size=5))
def test_projection_inverts_simulation(mus, lengths):
    mu = AttenuationVector.with_air(mus)
    pairs = [(k, lengths[k]) for k in range(len(mus) + 1)]
    i = simulate_pixel(pairs, mu, 1.0)
    p = to_projection(XRayImage(np.array([[i]]), 1.0, 0.1))[0, 0]
    assert p == pytest.approx(sum(mu.mu[k] * l for k, l in pairs), abs=1e-10)
