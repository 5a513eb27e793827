import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate

from cephmark.codec import (
    QUANT_BIAS_UNIT,
    AffineMap,
    GaussianSpec,
    HeatmapStack,
    LandmarkSet,
    affine_apply,
    decode_argmax,
    decode_dark,
    decode_shifted,
    encode_gaussian,
    flip_average,
    make_flip_map,
    make_jitter_map,
    make_resize_map,
    quantization_bias,
    warp_image,
)
from cephmark.tensor import SeededRng, flip_horizontal


def one(x, y):
    return LandmarkSet([[x, y]])


def render(points, stride, size=64, sigma=6.0):
    return encode_gaussian(LandmarkSet(points), GaussianSpec(sigma), size, size, stride)


def radial(a: LandmarkSet, b) -> np.ndarray:
    return np.hypot(*(a.points - np.asarray(b)).T)


# -- encoding ----------------------------------------------------------------


def test_encode_peak_on_grid():
    hm = render([[20.0, 12.0]], 4.0)
    assert hm.maps[0, 0, 3, 5] == 1.0
    assert hm.maps.max() == 1.0


def test_encode_value_at_one_sigma():
    hm = render([[30.0, 30.0]], 1.0)
    assert hm.maps[0, 0, 30, 36] == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert math.exp(-0.5) == pytest.approx(0.60653, abs=1e-5)


def test_encode_truncates_beyond_three_sigma():
    hm = render([[30.0, 30.0]], 1.0)
    assert hm.maps[0, 0, 30, 48] > 0  # exactly 3 sigma
    assert hm.maps[0, 0, 30, 49] == 0.0
    assert hm.maps[0, 0, 43, 43] == 0.0


def test_quantized_encoding_differs_off_grid():
    lm = one(10.5, 10.5)
    exact = encode_gaussian(lm, GaussianSpec(), 32, 32, 1.0).maps
    quant = encode_gaussian(lm, GaussianSpec(), 32, 32, 1.0, quantize=True).maps
    assert np.abs(exact - quant).max() > 0
    on_grid = one(10.0, 10.0)
    np.testing.assert_array_equal(
        encode_gaussian(on_grid, GaussianSpec(), 32, 32, 1.0).maps,
        encode_gaussian(on_grid, GaussianSpec(), 32, 32, 1.0, quantize=True).maps,
    )


def test_encode_invisible_and_out_of_frame(caplog):
    lm = LandmarkSet([[10.0, 10.0], [20.0, 20.0], [500.0, 3.0]], visible=[True, False, True])
    hm = encode_gaussian(lm, GaussianSpec(), 32, 32, 1.0)
    assert hm.maps[0, 0].max() == 1.0
    assert not hm.maps[0, 1].any()
    assert not hm.maps[0, 2].any()
    assert hm.flags.tolist() == [False, False, True]
    assert "outside the heatmap frame" in caplog.text


def test_gaussian_spec_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        GaussianSpec(0.0)


# -- decoders ----------------------------------------------------------------


def test_argmax_single_peak():
    maps = np.zeros((1, 1, 8, 8))
    maps[0, 0, 5, 2] = 3.0
    out = decode_argmax(HeatmapStack(maps, 2.0))
    np.testing.assert_array_equal(out.points, [[4.0, 10.0]])


def test_argmax_nearest_grid_point_bound():
    hm = render([[10.3, 20.7]], 4.0)
    out = decode_argmax(hm)
    np.testing.assert_array_equal(out.points, [[12.0, 20.0]])
    assert radial(out, [10.3, 20.7])[0] <= 0.5 * math.sqrt(2) * 4


def test_argmax_uniform_tie_and_zero_map():
    maps = np.stack([np.full((6, 6), 0.3), np.zeros((6, 6))])[None]
    out = decode_argmax(HeatmapStack(maps, 1.0))
    np.testing.assert_array_equal(out.points[0], [0.0, 0.0])
    assert out.flags[0] and out.visible[0]
    assert not out.visible[1]


def test_shifted_rules():
    sym = np.zeros((1, 1, 5, 5))
    sym[0, 0, 2, 1:4] = [0.5, 1.0, 0.5]
    sym[0, 0, 1:4, 2] = [0.5, 1.0, 0.5]
    np.testing.assert_array_equal(decode_shifted(HeatmapStack(sym, 1.0)).points, [[2.0, 2.0]])
    right = sym.copy()
    right[0, 0, 2, 3] = 0.7
    np.testing.assert_array_equal(decode_shifted(HeatmapStack(right, 1.0)).points, [[2.25, 2.0]])


def test_dark_zero_offset_on_grid():
    hm = render([[24.0, 36.0]], 4.0)
    np.testing.assert_array_equal(decode_dark(hm, GaussianSpec()).points, [[24.0, 36.0]])


def test_dark_recovers_example():
    hm = render([[10.3, 20.7]], 4.0)
    assert radial(decode_dark(hm, GaussianSpec()), [10.3, 20.7])[0] < 0.05


@pytest.mark.parametrize("stride", [1.0, 2.0, 4.0, 8.0])
def test_dark_roundtrip_random_centers(stride):
    rng = SeededRng(int(stride))
    size = 64
    margin = 3 * 6.0 / stride + 2
    mu_hm = rng.uniform(margin, size - 1 - margin, size=(100, 2))
    hm = render(mu_hm * stride, stride, size)
    err = radial(decode_dark(hm, GaussianSpec()), mu_hm * stride)
    assert err.max() < 0.05


@pytest.mark.parametrize("stride", [1.0, 2.0, 4.0])
def test_dark_with_modulation_roundtrip(stride):
    rng = SeededRng(99)
    mu_hm = rng.uniform(12, 51, size=(50, 2))
    hm = render(mu_hm * stride, stride, 64)
    err = radial(decode_dark(hm, GaussianSpec(), modulation=True), mu_hm * stride)
    assert err.max() < 0.05


def test_dark_boundary_falls_back_to_shifted():
    hm = render([[0.0, 30.0]], 1.0)
    out = decode_dark(hm)
    assert out.flags[0]
    np.testing.assert_array_equal(out.points, decode_shifted(hm).points)


def test_dark_singular_hessian_falls_back():
    maps = np.zeros((1, 1, 9, 9))
    maps[0, 0, 3:6, 3:6] = 1.0 - 1e-7  # nearly flat top: Hessian determinant ~4e-14
    maps[0, 0, 4, 4] = 1.0
    out = decode_dark(HeatmapStack(maps, 1.0))
    assert out.flags[0]
    np.testing.assert_array_equal(out.points, [[4.0, 4.0]])


def test_decoder_ordering_monte_carlo():
    for stride in (1.0, 2.0, 4.0, 8.0):
        rng = SeededRng(100 + int(stride))
        size = 48
        margin = 3 * 6.0 / stride + 2
        mu = rng.uniform(margin, size - 1 - margin, size=(1000, 2)) * stride
        hm = render(mu, stride, size)
        e_arg = radial(decode_argmax(hm), mu).mean()
        e_shift = radial(decode_shifted(hm), mu).mean()
        e_dark = radial(decode_dark(hm), mu).mean()
        assert e_dark < e_shift < e_arg


# -- flip test ---------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6)))
def test_flip_average_of_own_flip_is_exact(h):
    np.testing.assert_array_equal(flip_average(h, flip_horizontal(h)), h)


def test_flip_average_keeps_max_bound(nprng):
    a = nprng.random((1, 3, 8, 8))
    b = nprng.random((1, 3, 8, 8))
    assert flip_average(a, b).max() <= 1.0


def test_flip_average_swap_permutation(nprng):
    h = nprng.random((1, 2, 4, 5))
    flipped_swapped = flip_horizontal(h)[:, ::-1]
    np.testing.assert_array_equal(flip_average(h, flipped_swapped, swap=[1, 0]), h)
    with pytest.raises(ValueError):
        flip_average(h, h, swap=[0, 0])


def test_flip_average_heatmapstack_roundtrip():
    hm = render([[20.3, 30.1]], 2.0, 32)
    out = flip_average(hm, HeatmapStack(flip_horizontal(hm.maps), hm.stride))
    assert isinstance(out, HeatmapStack)
    np.testing.assert_array_equal(out.maps, hm.maps)


# -- affine maps -------------------------------------------------------------


def test_resize_last_pixel_center():
    m = make_resize_map(512, 512, 128, 128)
    np.testing.assert_array_equal(affine_apply(m, one(511.0, 0.0)).points, [[127.0, 0.0]])


def test_flip_map_involution():
    f = make_flip_map(100)
    np.testing.assert_allclose(f.compose(f).matrix, AffineMap.identity().matrix)
    np.testing.assert_array_equal(f.apply_xy([[0.0, 5.0]]), [[99.0, 5.0]])


def test_affine_roundtrip(nprng):
    m = make_jitter_map(128, 96, 1.17, 11.0, 3.2, -4.1).compose(make_resize_map(300, 200, 128, 96))
    pts = LandmarkSet(nprng.uniform(0, 200, size=(50, 2)))
    back = affine_apply(m.inverse(), affine_apply(m, pts))
    assert np.abs(back.points - pts.points).max() < 1e-12


affine_params = st.tuples(
    st.floats(0.5, 2.0), st.floats(-45, 45), st.floats(-20, 20), st.floats(-20, 20)
)


@settings(max_examples=50, deadline=None)
@given(affine_params, affine_params, affine_params)
def test_affine_composition_associative(p, q, r):
    a, b, c = (make_jitter_map(64, 64, *x) for x in (p, q, r))
    left = a.compose(b).compose(c).matrix
    right = a.compose(b.compose(c)).matrix
    np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-9)


def test_non_invertible_map_rejected():
    with pytest.raises(ValueError):
        AffineMap([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]])


def test_warp_keeps_image_and_landmarks_aligned():
    # a Gaussian blob rendered at mu, warped, then decoded, lands on A(mu)
    mu = np.array([[40.3, 51.7]])
    img = render(mu, 1.0, 96, sigma=4.0).maps[0, 0]
    amap = make_jitter_map(96, 96, 1.1, 12.0, 2.5, -3.0)
    warped = warp_image(img, amap, 96, 96)
    out = decode_dark(HeatmapStack(warped[None, None], 1.0), GaussianSpec(4.0))
    target = amap.apply_xy(mu)
    assert radial(out, target[0])[0] < 0.1


# -- quantization bias -------------------------------------------------------


def test_closed_form_constant_matches_quadrature():
    val, _ = integrate.dblquad(lambda v, u: math.hypot(u, v), -0.5, 0.5, -0.5, 0.5)
    assert QUANT_BIAS_UNIT == pytest.approx(val, rel=1e-10)
    assert QUANT_BIAS_UNIT == pytest.approx(0.3826, abs=1e-4)


@pytest.mark.parametrize("stride", [1, 2, 4, 8])
def test_quantization_bias_law(stride):
    mean = quantization_bias(stride, 10**6, SeededRng(stride))
    assert mean == pytest.approx(QUANT_BIAS_UNIT * stride, rel=0.01)
    assert abs(mean / stride - QUANT_BIAS_UNIT) < 0.005


def test_quantization_bias_monotone_and_histogram():
    means = [quantization_bias(s, 20000, SeededRng(3)) for s in (0.25, 0.5, 1, 2, 4)]
    assert all(a < b for a, b in zip(means, means[1:]))
    mean, (counts, edges) = quantization_bias(2.0, 1000, SeededRng(3), bins=10)
    assert counts.sum() == 1000 and len(edges) == 11


def test_dark_falls_back_when_gaussian_is_narrower_than_grid():
    # sigma 2 at stride 8: the 3-sigma support misses the stencil neighbors
    mu = np.array([[101.0, 99.0]])
    hm = render(mu, 8.0, size=32, sigma=2.0)
    out = decode_dark(hm, GaussianSpec(2.0))
    assert out.flags[0]
    np.testing.assert_allclose(out.points, decode_shifted(hm).points)


def test_dark_rejects_saddle():
    # strong diagonal coupling at the argmax: det(H) < 0, Newton would head for a saddle
    m = np.full((1, 1, 7, 7), 0.3)
    m[0, 0, 2:5, 2:5] = [[0.99, 0.9, 0.5], [0.9, 1.0, 0.9], [0.5, 0.9, 0.99]]
    out = decode_dark(HeatmapStack(m, 1.0))
    assert out.flags[0]
    np.testing.assert_allclose(out.points, [[3.0, 3.0]])
