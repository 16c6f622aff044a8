import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partfield import autodiff as ad
from partfield import sdf
from partfield.autodiff import Tape

from oracles import ellipsoid_distance_bruteforce


def test_sphere_center():
    assert sdf.ellipsoid_sdf_np([0, 0, 0], [1, 1, 1]) == pytest.approx(-1.0)


def test_sphere_outside():
    assert sdf.ellipsoid_sdf_np([2, 0, 0], [1, 1, 1]) == pytest.approx(1.0)


def test_prolate_on_axis_interior():
    # nearest surface point is the pole (0, 0, 1); the off-axis stationary
    # branch is farther, so the distance is exactly 0.5
    assert sdf.ellipsoid_sdf_np([0, 0, 0.5], [2, 1, 1]) == pytest.approx(-0.5, abs=1e-9)


def test_prolate_generic_point_matches_bruteforce():
    d = sdf.ellipsoid_sdf_np([1, 1, 1], [2, 1, 1])
    brute = ellipsoid_distance_bruteforce([1, 1, 1], [2, 1, 1], n_samples=10**6)
    assert d == pytest.approx(brute, abs=1e-3)
    assert d == pytest.approx(0.5299480562753406, abs=1e-9)  # frozen from the oracle


def test_long_axis_interior_saddle_case():
    # on the long axis beyond the evolute the nearest point leaves the axis
    d = sdf.ellipsoid_sdf_np([1, 0, 0], [2, 1, 1])
    brute = ellipsoid_distance_bruteforce([1, 0, 0], [2, 1, 1], n_samples=10**6)
    assert d == pytest.approx(-brute, abs=1e-6)
    assert d == pytest.approx(-np.sqrt(2.0 / 3.0), abs=1e-6)


def test_surface_points_are_zero_level():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(1000, 3))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    r = rng.uniform(0.05, 1.5, size=(1000, 3))
    d = sdf.ellipsoid_sdf_np(u * r, r)
    assert np.abs(d).max() < 1e-6
    level = sdf.ellipsoid_level(u * r, r)
    assert np.abs(level - 1.0).max() < 1e-9


def test_sign_matches_level_set():
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, size=(5000, 3))
    r = rng.uniform(0.05, 1.5, size=(5000, 3))
    d = sdf.ellipsoid_sdf_np(x, r)
    sign = np.sign(sdf.ellipsoid_level(x, r) - 1.0)
    assert np.all(np.sign(d) == sign)


def test_newton_residuals_many_random():
    rng = np.random.default_rng(2)
    x = rng.uniform(-2, 2, size=(10_000, 3))
    r = rng.uniform(0.05, 1.5, size=(10_000, 3))
    _, res, stats = sdf.nearest_point_on_ellipsoid(x, r)
    assert res.max() < 1e-10
    assert stats.max_residual < 1e-10


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 40:
        x0 = rng.uniform(-1.5, 1.5, size=3)
        r0 = rng.uniform(0.2, 1.2, size=3)
        d = sdf.ellipsoid_sdf_np(x0, r0)
        if abs(d) < 1e-3 or np.linalg.norm(x0) < 0.05:
            continue  # non-smooth loci excluded

        def build(tape, leaves):
            return ad.sum_(sdf.ellipsoid_sdf(leaves["x"], leaves["r"]))

        report = ad.gradcheck(build, {"x": x0, "r": r0}, h=1e-6, tol=1e-4, rng=rng)
        assert report.passed, repr(report)
        checked += 1


def test_pe_weights_uniform_for_equal_distances():
    tape = Tape()
    d = tape.leaf(np.zeros((5, 4)) + 0.3)
    w = sdf.pe_weights(d, tape.constant(7.0))
    np.testing.assert_allclose(w.data, 0.25)


def test_pe_weights_single_part():
    tape = Tape()
    w = sdf.pe_weights(tape.leaf([[0.7]]), tape.constant(3.0))
    np.testing.assert_allclose(w.data, 1.0)


def test_pe_weights_contrast():
    tape = Tape()
    w = sdf.pe_weights(tape.leaf([[0.0, 10.0]]), tape.constant(1.0))
    expected = np.exp([0.0, -10.0])
    expected /= expected.sum()
    np.testing.assert_allclose(w.data[0], expected, rtol=1e-12)
    assert w.data.sum() == pytest.approx(1.0)


def test_compress_residual_bounds_and_symmetry():
    tape = Tape()
    s = tape.constant(1.0)
    assert sdf.compress_residual(tape.leaf(0.0), s, 0.02).data == 0.0
    big = sdf.compress_residual(tape.leaf(1e6), s, 0.02).data
    small = sdf.compress_residual(tape.leaf(-1e6), s, 0.02).data
    # |tanh| < 1 mathematically; float64 saturates to exactly 1 at +-1e6
    assert abs(big) <= 0.02 and abs(small) <= 0.02
    assert big == pytest.approx(0.02, abs=1e-12)
    a = sdf.compress_residual(tape.leaf(0.37), s, 0.02).data
    b = sdf.compress_residual(tape.leaf(-0.37), s, 0.02).data
    assert a == pytest.approx(-b)


def test_softmin_single_part_exact():
    tape = Tape()
    d = tape.leaf([[0.42]])
    out = sdf.softmin_sdf(d, tape.constant(13.0))
    assert out.data[0] == pytest.approx(0.42, abs=1e-15)


def test_softmin_two_equal_parts():
    tape = Tape()
    s_d = 11.0
    out = sdf.softmin_sdf(tape.leaf([[0.3, 0.3]]), tape.constant(s_d))
    assert out.data[0] == pytest.approx(0.3 - np.log(2.0) / s_d)


def test_softmin_bounds_three_parts():
    rng = np.random.default_rng(4)
    tape = Tape()
    d = rng.uniform(-0.5, 0.5, size=(100, 3))
    s_d = 9.0
    out = sdf.softmin_sdf(tape.leaf(d), tape.constant(s_d))
    lo = d.min(axis=1) - np.log(3.0) / s_d
    hi = d.min(axis=1)
    assert np.all(out.data >= lo - 1e-12)
    assert np.all(out.data <= hi + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmin_monotone_in_each_part(seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(-0.5, 0.5, size=4)
    k = int(rng.integers(0, 4))
    bumped = d.copy()
    bumped[k] += rng.uniform(0.0, 0.5)
    tape = Tape()
    base = sdf.softmin_sdf(tape.leaf(d[None]), tape.constant(6.0)).data[0]
    more = sdf.softmin_sdf(tape.leaf(bumped[None]), tape.constant(6.0)).data[0]
    assert more >= base - 1e-12


def test_spatial_gradient_radial_field():
    tape = Tape()
    radii = tape.constant(np.ones(3))

    def field(pts):
        return sdf.ellipsoid_sdf(tape.constant(pts), radii)

    g = sdf.sdf_spatial_gradient(field, np.array([[0.5, 0.0, 0.0]]), h=1e-3)
    np.testing.assert_allclose(g.data[0], [1.0, 0.0, 0.0], atol=1e-3)
    assert np.linalg.norm(g.data[0]) == pytest.approx(1.0, abs=1e-3)


def test_spatial_gradient_softmin_seam():
    # two spheres; on the equidistant midplane the softmin flattens the field
    centers = np.array([[-0.4, 0.0, 0.0], [0.4, 0.0, 0.0]])
    tape = Tape()

    def field(pts):
        d = [
            sdf.ellipsoid_sdf(tape.constant(pts - c), tape.constant(np.full(3, 0.2)))
            for c in centers
        ]
        return sdf.softmin_sdf(ad.stack(d, axis=-1), tape.constant(8.0))

    g_mid = sdf.sdf_spatial_gradient(field, np.array([[0.0, 0.0, 0.0]]), h=1e-3)
    assert np.linalg.norm(g_mid.data[0]) < 1.0
    # clearly dominated by one part (not on the equidistant plane)
    g_far = sdf.sdf_spatial_gradient(field, np.array([[1.2, 1.5, 0.0]]), h=1e-3)
    assert np.linalg.norm(g_far.data[0]) == pytest.approx(1.0, abs=2e-2)


def test_surface_sampling_on_surface_and_spread():
    rng = np.random.default_rng(5)
    r = np.array([0.5, 0.2, 0.1])
    pts = sdf.sample_ellipsoid_surface(r, 500, rng)
    np.testing.assert_allclose(sdf.ellipsoid_level(pts, r), 1.0, atol=1e-12)
    assert pts.std(axis=0).min() > 0.01  # all three axes covered


def test_partset_clamp():
    ps = sdf.PartSet(np.array([[2.0, 0.5, 1e-9]]), 0.0, 0.0, 0.0)
    ps.clamp_radii()
    np.testing.assert_allclose(ps.radii, [[1.0, 0.5, 1e-3]])
