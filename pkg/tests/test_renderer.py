import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from sdsfield.field import VoxelField, init_field, query
from sdsfield.geometry import Camera, orbit_camera
from sdsfield.renderer import (RaySampleSet, SamplingConfig, depth_disparity, render, render_grad, render_image,
                               weighted_moments, z_variance)
from sdsfield.scenes import sphere_field

LN2 = math.log(2.0)


def one_ray(z, tau_or_sigma, colors, cap=1e3):
    return RaySampleSet(np.array([z], float), np.array([tau_or_sigma], float), np.array([colors], float), cap)


def test_empty_ray_is_background():
    out = render(one_ray([0.0, 1.0], [0.0, 0.0], [[1, 0, 0], [0, 1, 0]]), [0.2, 0.3, 0.4])
    assert out.opacity[0] == 0.0
    np.testing.assert_array_equal(out.color[0], [0.2, 0.3, 0.4])
    assert out.background[0] and out.depth[0] == 0.0 and out.disparity[0] == 0.0 and out.zvar[0] == 0.0


def test_single_sample_half_opacity():
    # with one sample the interval is the cap, so sigma = ln2 / cap
    out = render(one_ray([1.0], [LN2 / 1e3], [[1, 0, 0]]), [0, 0, 0])
    assert out.weights[0, 0] == pytest.approx(0.5, rel=1e-15)
    np.testing.assert_allclose(out.color[0], [0.5, 0, 0], rtol=1e-15)


def test_two_samples_transmittance_recursion():
    out = render(one_ray([0.0, 1.0], [LN2, LN2 / 1e3], [[1, 1, 1], [0, 0, 0]]), [0, 0, 0])
    np.testing.assert_allclose(out.weights[0], [0.5, 0.25], rtol=1e-15)
    assert out.opacity[0] == pytest.approx(0.75, rel=1e-15)
    np.testing.assert_allclose(out.transmittance[0], [1.0, 0.5], rtol=1e-15)


def test_moments_examples():
    mu, d, var, bg = weighted_moments(np.array([[2.0, 5.0]]), np.array([[0.7, 0.0]]))
    assert (mu[0], d[0], var[0]) == (2.0, 0.5, 0.0)
    mu, _, var, _ = weighted_moments(np.array([[1.0, 3.0]]), np.array([[0.5, 0.5]]))
    assert mu[0] == 2.0 and var[0] == 1.0
    mu, _, var, _ = weighted_moments(np.array([[1.0, 2.0]]), np.array([[0.5, 0.25]]))
    assert mu[0] == pytest.approx(4 / 3, abs=1e-12)
    assert var[0] == pytest.approx(2 / 9, abs=1e-12)


def test_render_moments_two_point():
    out = render(one_ray([1.0, 2.0], [LN2, LN2 / 1e3], [[0, 0, 0]] * 2), [0, 0, 0])
    mu, d = depth_disparity(out)
    assert mu[0] == pytest.approx(4 / 3, abs=1e-12) and d[0] == pytest.approx(0.75, abs=1e-12)
    assert z_variance(out)[0] == pytest.approx(2 / 9, abs=1e-12)


def test_dirac_weights_have_exactly_zero_variance():
    z = np.array([[0.3, 1.7, 2.2, 9.0]])
    sig = np.array([[0.0, 123.4, 0.0, 0.0]])
    out = render(RaySampleSet(z, sig, np.zeros((1, 4, 3))), [0, 0, 0])
    assert out.zvar[0] == 0.0
    assert out.depth[0] == 1.7


def test_below_opacity_floor_flagged():
    out = render(one_ray([0.0, 1.0], [1e-7, 0.0], [[1, 1, 1]] * 2), [0, 0, 0])
    assert out.background[0] and out.depth[0] == 0.0


def test_duplicate_positions_collapse():
    a = render(one_ray([0.0, 1.0, 1.0 + 1e-12, 2.0], [0.5, 0.7, 0.9, 0.3], [[1, 0, 0]] * 4), [0, 0, 0])
    assert a.weights[0, 1] == 0.0


def test_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 10))
        z = np.sort(rng.uniform(0, 4, n))
        sig = rng.exponential(1.0, n)
        col = rng.random((n, 3))
        bg = rng.random(3)
        out = render(RaySampleSet(z[None], sig[None], col[None]), bg)
        ref = oracles.render_ray(z, sig, col, bg)
        np.testing.assert_allclose(out.weights[0], ref["weights"], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(out.color[0], ref["color"], rtol=1e-12)
        if ref["depth"] is not None:
            assert out.depth[0] == pytest.approx(ref["depth"], rel=1e-12)
            assert out.zvar[0] == pytest.approx(ref["zvar"], rel=1e-9, abs=1e-15)


# --- gradients --------------------------------------------------------------

UPSTREAMS = ("g_color", "g_rgb", "g_opacity", "g_depth", "g_disparity", "g_zvar")


def _scalar(samples, bg, ups):
    out = render(samples, bg)
    return float(np.sum(ups["g_color"] * out.color) + np.sum(ups["g_rgb"] * out.rgb)
                 + np.sum(ups["g_opacity"] * out.opacity) + np.sum(ups["g_depth"] * out.depth)
                 + np.sum(ups["g_disparity"] * out.disparity) + np.sum(ups["g_zvar"] * out.zvar))


def test_render_grad_zero_upstream():
    s = RaySampleSet(np.array([[0.0, 1.0, 2.0]]), np.ones((1, 3)), np.full((1, 3, 3), 0.5))
    gs, gc, gb = render_grad(s, render(s, [0.1, 0.2, 0.3]), [0.1, 0.2, 0.3])
    assert not gs.any() and not gc.any() and not gb.any()


def test_background_gradient_is_residual_transmittance():
    s = RaySampleSet(np.array([[0.0, 1.0, 2.0]]), np.array([[0.3, 0.8, 0.1]]), np.full((1, 3, 3), 0.5))
    out = render(s, [0.0, 0.0, 0.0])
    _, _, gb = render_grad(s, out, [0, 0, 0], g_color=np.array([[1.0, 0.0, 0.0]]))
    np.testing.assert_allclose(gb, [1 - out.opacity[0], 0, 0], rtol=1e-15)


def test_render_grad_finite_difference_8_sample_rays():
    rng = np.random.default_rng(11)
    n_rays, n = 6, 8
    z = np.sort(rng.uniform(0.5, 4.0, (n_rays, n)), axis=1)
    sig = rng.exponential(0.8, (n_rays, n))
    col = rng.random((n_rays, n, 3))
    bg = rng.random(3)
    ups = {"g_color": rng.normal(size=(n_rays, 3)), "g_rgb": rng.normal(size=(n_rays, 3)),
           "g_opacity": rng.normal(size=n_rays), "g_depth": rng.normal(size=n_rays),
           "g_disparity": rng.normal(size=n_rays), "g_zvar": rng.normal(size=n_rays)}
    s = RaySampleSet(z, sig, col)
    gs, gc, gb = render_grad(s, render(s, bg), bg, **ups)
    h = 1e-5
    for r in range(n_rays):
        for i in range(n):
            for arr, g in ((sig, gs[r, i]), ):
                orig = arr[r, i]
                arr[r, i] = orig + h
                fp = _scalar(RaySampleSet(z, sig, col), bg, ups)
                arr[r, i] = orig - h
                fm = _scalar(RaySampleSet(z, sig, col), bg, ups)
                arr[r, i] = orig
                fd = (fp - fm) / (2 * h)
                assert g == pytest.approx(fd, rel=1e-6, abs=1e-9)
            for c in range(3):
                orig = col[r, i, c]
                col[r, i, c] = orig + h
                fp = _scalar(RaySampleSet(z, sig, col), bg, ups)
                col[r, i, c] = orig - h
                fm = _scalar(RaySampleSet(z, sig, col), bg, ups)
                col[r, i, c] = orig
                assert gc[r, i, c] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-9)
    for c in range(3):
        b2 = bg.copy()
        b2[c] += h
        fp = _scalar(s, b2, ups)
        b2[c] -= 2 * h
        fm = _scalar(s, b2, ups)
        assert gb[c] == pytest.approx((fp - fm) / (2 * h), rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_weight_invariants(seed):
    rng = np.random.default_rng(seed)
    n_rays, n = 100, int(rng.integers(1, 40))
    z = np.sort(rng.uniform(0, 10, (n_rays, n)), axis=1)
    sig = rng.exponential(rng.uniform(0.01, 50), (n_rays, n)) * (rng.random((n_rays, n)) < 0.7)
    out = render(RaySampleSet(z, sig, rng.random((n_rays, n, 3))), rng.random(3))
    assert np.all(out.weights >= 0)
    assert np.all(out.opacity <= 1 + 1e-9)
    assert np.all(np.diff(out.transmittance, axis=1) <= 0)
    fg = ~out.background
    assert np.all(out.depth[fg] >= z[fg, 0] - 1e-9) and np.all(out.depth[fg] <= z[fg, -1] + 1e-9)
    assert np.all(out.zvar >= 0)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 20), k=st.integers(0, 19), sigma=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_zvar_zero_when_one_weight_nonzero(n, k, sigma, seed):
    k = k % n
    z = np.sort(np.random.default_rng(seed).uniform(0, 5, n)) + np.arange(n) * 1e-3
    sig = np.zeros(n)
    sig[k] = sigma
    out = render(RaySampleSet(z[None], sig[None], np.zeros((1, n, 3))), [0, 0, 0])
    assert out.zvar[0] == 0.0


# --- full images --------------------------------------------------------------

def test_zero_density_field_renders_background():
    fld = init_field((4, 4, 4), init_mode="empty")
    fld.density_raw[...] = -1e4
    res = render_image(fld, orbit_camera(0.4, 0.3, 3.0, width=8, height=8), SamplingConfig(), np.random.default_rng(0))
    np.testing.assert_array_equal(res.image, np.broadcast_to(fld.background, (8, 8, 3)))


def test_render_image_deterministic():
    fld = sphere_field((12, 12, 12))
    cam = orbit_camera(1.0, 0.2, 3.0, width=16, height=16)
    a = render_image(fld, cam, SamplingConfig(), np.random.default_rng(42)).image
    b = render_image(fld, cam, SamplingConfig(), np.random.default_rng(42)).image
    assert a.tobytes() == b.tobytes()


def test_opacity_matches_projected_sphere():
    fld = sphere_field((48, 48, 48), radius=0.6, density=40.0)
    cam = orbit_camera(0.7, 0.25, 3.0, width=32, height=32)
    res = render_image(fld, cam, SamplingConfig(jitter=False))
    opacity = res.map("opacity").ravel()
    hit = np.array([oracles.ray_sphere_hit(cam.position, d, np.zeros(3), 0.6) for d in res.rays.directions])
    # stay clear of silhouette pixels, where a voxel-wide edge blurs the disk
    margin = np.array([abs(np.linalg.norm(np.cross(cam.position, d)) - 0.6) > 0.06 for d in res.rays.directions])
    assert np.all(opacity[hit & margin] > 0.9)
    assert np.all(opacity[~hit & margin] < 0.1)


def test_refinement_converges_with_more_fine_samples():
    fld = sphere_field((24, 24, 24), density=8.0, edge_cells=4.0)
    cam = orbit_camera(0.3, 0.1, 3.0, width=16, height=16)
    images = [render_image(fld, cam, SamplingConfig(n_coarse=16, n_fine=n, jitter=False)).image
              for n in (16, 32, 64, 128)]
    diffs = [np.mean(np.abs(images[i + 1] - images[i])) for i in range(3)]
    assert diffs[0] > diffs[1] > diffs[2]


def test_maps_shapes_and_background_rays():
    fld = sphere_field((16, 16, 16))
    fld.density_raw[fld.density_raw <= -8.0] = -60.0  # truly empty outside the sphere
    res = render_image(fld, orbit_camera(0.0, 0.0, 3.0, width=8, height=8), SamplingConfig(jitter=False))
    for name in ("depth", "disparity", "opacity", "zvar"):
        assert res.map(name).shape == (8, 8)
    corner = res.map("opacity")[0, 0]
    assert corner < 1e-6 and res.map("disparity")[0, 0] == 0.0
    d = res.rays.directions[4 * 8 + 4]
    b = float(res.rays.origins[4 * 8 + 4] @ d)
    hit = -b - np.sqrt(b * b - (9.0 - 0.36))
    # the density ramp spans one voxel (2 / 15) around the surface
    assert abs(res.map("depth")[4, 4] - hit) < 2 / 15
