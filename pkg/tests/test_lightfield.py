import numpy as np
import pytest
from scipy import stats

from dropin.errors import DegenerateDistributionError
from dropin.lightfield import (
    EnvironmentMap,
    SgLightingParams,
    SgLobe,
    blend_scheduled,
    build_sampling_tables,
    cauchy_reg,
    consistency_loss,
    direction_from_pixel,
    envmap_bake,
    envmap_pdf,
    envmap_sample,
    fibonacci_sphere,
    fuse,
    init_lighting,
    normalized_luminance,
    sg_eval,
    sg_eval_vjp,
    solid_angle_grid,
)
from dropin.rng import rng_stream

from conftest import random_lighting


# ---------------------------------------------------------------------------
# sg_eval


def test_sg_eval_on_axis_returns_color():
    lobe = SgLobe(np.log([1.0, 1.0, 1.0]), [0.0, 0.0, 1.0], np.log(0.5))
    assert np.allclose(sg_eval(lobe, [0, 0, 1]), [1, 1, 1])
    lobe2 = SgLobe(np.log([2.0, 1e-12, 1.0]), [0.0, 0.0, 1.0], np.log(0.37))
    assert np.allclose(sg_eval(lobe2, [0, 0, 1]), [2.0, 1e-12, 1.0])


def test_sg_eval_orthogonal_direction():
    # closed form: exp(-(1 - 0)/0.25) = e^-4
    lobe = SgLobe(np.log([1.0, 1.0, 1.0]), [0.0, 0.0, 1.0], np.log(0.5))
    assert np.allclose(sg_eval(lobe, [1, 0, 0]), np.exp(-4.0), rtol=1e-12)


def test_sg_eval_rejects_bad_input():
    lobe = SgLobe(np.zeros(3), [0.0, 0.0, 1.0], 0.0)
    with pytest.raises(ValueError):
        sg_eval(lobe, [0, 0, 2.0])
    with pytest.raises(ValueError):
        sg_eval(lobe, [np.nan, 0, 1])


def test_sg_eval_gradient_matches_finite_differences(rng):
    # analytic vjp vs central differences at h=1e-4, 20 lobes x 20 directions
    h = 1e-4
    for _ in range(20):
        p0 = np.concatenate(
            [rng.normal(0, 0.5, 3), rng.normal(0, 1, 3) + [0, 0, 1.3],
             [rng.uniform(np.log(0.05), np.log(1.5))]]
        )
        for _ in range(1):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            u = rng.normal(size=3)
            lobe = SgLobe(p0[:3], p0[3:6], p0[6])
            g = sg_eval_vjp(lobe, v, u)
            for k in range(7):
                pp = p0.copy()
                pp[k] += h
                lp = u @ sg_eval(SgLobe(pp[:3], pp[3:6], pp[6]), v)
                pp[k] -= 2 * h
                lm = u @ sg_eval(SgLobe(pp[:3], pp[3:6], pp[6]), v)
                num = (lp - lm) / (2 * h)
                denom = max(abs(g[k]), abs(num), 1e-8)
                assert abs(g[k] - num) / denom < 1e-4


# ---------------------------------------------------------------------------
# parameterization


def test_direction_from_pixel_matches_mapping():
    v = direction_from_pixel(0, 0, 2, 4)
    s = np.sin(np.pi / 4)
    assert np.allclose(v, [s * np.cos(np.pi / 4), s * np.sin(np.pi / 4), np.cos(np.pi / 4)])


def test_direction_unit_norm_random(rng):
    H, W = 64, 128
    ii = rng.integers(0, H, 1000)
    jj = rng.integers(0, W, 1000)
    v = direction_from_pixel(ii, jj, H, W)
    assert np.allclose(np.linalg.norm(v, axis=-1), 1.0, atol=1e-12)


def test_direction_pole_limit():
    v = direction_from_pixel(0, 3, 4096, 8192)
    assert v[2] > 0.9999996


def test_direction_rejects_out_of_range():
    with pytest.raises(ValueError):
        direction_from_pixel(-1, 0, 4, 8)
    with pytest.raises(ValueError):
        direction_from_pixel(0, 8, 4, 8)


def test_solid_angle_closure():
    for H, W in [(64, 128), (128, 256), (2, 4)]:
        assert abs(solid_angle_grid(H, W).sum() - 4 * np.pi) < 1e-3 * 4 * np.pi


# ---------------------------------------------------------------------------
# baking


def test_bake_single_lobe_peak_pixel():
    params = SgLightingParams(np.log([[0.7, 0.8, 0.9]]), [[0, 0, 1.0]], [np.log(0.4)])
    env = envmap_bake(params, 64, 128)
    # the pixel whose direction is closest to the axis approaches the color
    top = env.pixels[0].max(axis=0)
    assert np.allclose(top, [0.7, 0.8, 0.9], rtol=2e-3)


def test_bake_zero_color_lobe_gives_black_map():
    # exp(-1000) underflows to exactly zero: a zero-radiance lobe
    params = SgLightingParams(np.full((1, 3), -1000.0), [[0, 0, 1.0]], [0.0])
    env = envmap_bake(params, 16, 32)
    assert np.all(env.pixels == 0.0)


def test_bake_two_identical_lobes_double(rng):
    L1 = random_lighting(rng, 1)
    L2 = SgLightingParams(
        np.repeat(L1.log_color, 2, axis=0),
        np.repeat(L1.axis_raw, 2, axis=0),
        np.repeat(L1.log_sharpness, 2),
    )
    e1 = envmap_bake(L1, 16, 32)
    e2 = envmap_bake(L2, 16, 32)
    assert np.allclose(e2.pixels, 2 * e1.pixels, rtol=1e-14)


def test_bake_linear_in_color(rng):
    L = random_lighting(rng, 3)
    doubled = SgLightingParams(L.log_color + np.log(2.0), L.axis_raw, L.log_sharpness)
    assert np.allclose(envmap_bake(doubled, 16, 32).pixels, 2 * envmap_bake(L, 16, 32).pixels)


def test_lighting_params_flat_round_trip(rng):
    L = random_lighting(rng, 5)
    back = SgLightingParams.from_flat(L.to_flat())
    assert np.array_equal(back.log_color, L.log_color)
    assert np.array_equal(back.axis_raw, L.axis_raw)
    assert np.array_equal(back.log_sharpness, L.log_sharpness)


def test_zero_lobes_rejected():
    with pytest.raises(ValueError):
        SgLightingParams(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))


# ---------------------------------------------------------------------------
# sampling


def test_uniform_map_pdf_quarter_pi(rng):
    env = EnvironmentMap(np.ones((32, 64, 3)))
    tables = build_sampling_tables(env)
    for k in range(200):
        u = rng_stream(11, k, 0, 0, 1, 2)
        d, pdf = envmap_sample(env, u[0], u[1], tables)
        assert abs(pdf - 1.0 / (4 * np.pi)) < 1e-3
        assert abs(np.linalg.norm(d) - 1.0) < 1e-12


def test_single_bright_pixel_gets_all_samples(rng):
    pix = np.zeros((8, 16, 3))
    pix[3, 5] = [5.0, 5.0, 5.0]
    env = EnvironmentMap(pix)
    tables = build_sampling_tables(env)
    from dropin.lightfield import pixel_from_direction

    for k in range(100):
        u = rng_stream(13, k, 0, 0, 1, 2)
        d, pdf = envmap_sample(env, u[0], u[1], tables)
        assert pixel_from_direction(d, 8, 16) == (3, 5)


def test_sample_histogram_chi_square(rng):
    env = EnvironmentMap(0.2 + rng.random((8, 16, 3)))
    tables = build_sampling_tables(env)
    n = 1_000_000
    u = rng.random((n, 2))
    counts = np.zeros(8 * 16)
    from dropin.lightfield import _sample_env_dir

    idx_i = np.searchsorted(tables[0], u[:, 0], side="right").clip(0, 8 * 16 - 1)
    for flat in idx_i:
        counts[flat] += 1
    w = env.luminance() * env.delta_omega
    expected = (w / w.sum()).ravel() * n
    chi2 = stats.chisquare(counts, expected)
    assert chi2.pvalue > 1e-4  # not catastrophically off
    # and tighter: relative deviation of every sufficiently populated bin
    mask = expected > 500
    assert np.max(np.abs(counts[mask] - expected[mask]) / expected[mask]) < 0.05


def test_pdf_integrates_to_one(random_env):
    tables = build_sampling_tables(random_env)
    total = (tables[1] * random_env.delta_omega).sum()
    assert abs(total - 1.0) < 1e-3


def test_pdf_matches_sample_reported_pdf(random_env, rng):
    tables = build_sampling_tables(random_env)
    for k in range(1000):
        u = rng_stream(17, k, 0, 0, 1, 2)
        d, pdf = envmap_sample(random_env, u[0], u[1], tables)
        assert abs(envmap_pdf(random_env, d, tables) - pdf) <= 1e-6 * max(pdf, 1e-12)


def test_black_map_sampling_degenerate():
    env = EnvironmentMap(np.zeros((4, 8, 3)))
    with pytest.raises(DegenerateDistributionError):
        build_sampling_tables(env)


# ---------------------------------------------------------------------------
# luminance statistics


def test_normalized_luminance_uniform():
    env = EnvironmentMap(np.ones((16, 32, 3)))
    nl = normalized_luminance(env)
    assert np.allclose(nl, 1.0 / (4 * np.pi))


def test_normalized_luminance_scale_invariant(random_env):
    nl1 = normalized_luminance(random_env)
    nl2 = normalized_luminance(EnvironmentMap(3.7 * random_env.pixels))
    assert np.allclose(nl1, nl2, rtol=1e-12)


def test_normalized_luminance_channel_weights():
    green = np.zeros((8, 16, 3))
    green[:, :, 1] = 2.0
    red = np.zeros((8, 16, 3))
    red[:, :, 0] = 2.0
    lg = EnvironmentMap(green).luminance()
    lr = EnvironmentMap(red).luminance()
    assert np.allclose(lg / lr, 0.7152 / 0.2126)


def test_normalized_luminance_rejects_black():
    with pytest.raises(DegenerateDistributionError):
        normalized_luminance(EnvironmentMap(np.zeros((4, 8, 3))))


def test_consistency_identical_maps_is_entropy(random_env):
    loss = consistency_loss(random_env, random_env)
    nl = normalized_luminance(random_env)
    entropy = -(nl * np.log(np.maximum(nl, 1e-8)) * random_env.delta_omega).sum()
    assert np.isclose(loss, entropy, rtol=1e-12)


def test_consistency_gibbs_inequality(rng):
    for _ in range(100):
        a = EnvironmentMap(0.05 + rng.random((8, 16, 3)))
        b = EnvironmentMap(0.05 + rng.random((8, 16, 3)))
        assert consistency_loss(a, b) >= consistency_loss(b, b) - 1e-12


def test_consistency_uniform_closed_form():
    a = EnvironmentMap(np.ones((64, 128, 3)))
    b = EnvironmentMap(2.0 * np.ones((64, 128, 3)))
    assert np.isclose(consistency_loss(a, b), np.log(4 * np.pi), rtol=1e-10)
    assert np.isclose(consistency_loss(a, b), 2.531, atol=5e-4)


def test_consistency_shape_mismatch():
    a = EnvironmentMap(np.ones((8, 16, 3)))
    b = EnvironmentMap(np.ones((8, 32, 3)))
    with pytest.raises(ValueError):
        consistency_loss(a, b)


def test_cauchy_zero_map():
    assert cauchy_reg(EnvironmentMap(np.zeros((8, 16, 3)))) == 0.0


def test_cauchy_unit_map_closed_form():
    val = cauchy_reg(EnvironmentMap(np.ones((64, 128, 3))))
    assert np.isclose(val, 3 * np.log(3.0) * 4 * np.pi, rtol=1e-2)


def test_cauchy_monotone_in_magnitude(rng):
    base = 0.2 + rng.random((8, 16, 3))
    v0 = cauchy_reg(EnvironmentMap(base))
    for _ in range(20):
        bumped = base.copy()
        idx = tuple(rng.integers(0, s) for s in base.shape)
        bumped[idx] += rng.uniform(0.01, 1.0)
        assert cauchy_reg(EnvironmentMap(bumped)) > v0


# ---------------------------------------------------------------------------
# fusion


def test_fuse_equal_maps_identity(random_env):
    fused = fuse(random_env, random_env)
    assert np.allclose(fused.pixels, random_env.pixels, rtol=1e-12)


def test_fuse_luminance_between_inputs(random_env):
    scaled = EnvironmentMap(0.35 * random_env.pixels)
    fused = fuse(random_env, scaled)
    yf = random_env.luminance()
    ys = scaled.luminance()
    y = fused.luminance()
    lo = np.minimum(yf, ys) - 1e-9
    hi = np.maximum(yf, ys) + 1e-9
    assert np.all(y >= lo) and np.all(y <= hi)


def test_fuse_blend_ratio_at_peak(rng):
    a = EnvironmentMap(0.1 + rng.random((8, 16, 3)))
    b = EnvironmentMap(0.1 + rng.random((8, 16, 3)))
    yf = a.luminance()
    ys = b.luminance()
    i, j = np.unravel_index(np.argmax(yf), yf.shape)
    r_peak = ys[i, j] / (yf[i, j] + ys[i, j])
    yfused = fuse(a, b).luminance()
    expect = (1 - r_peak) * yf[i, j] + r_peak * ys[i, j]
    assert np.isclose(yfused[i, j], expect, rtol=1e-9)


def test_fuse_joint_scale_equivariant(random_env, rng):
    other = EnvironmentMap(0.05 + rng.random((16, 32, 3)))
    f1 = fuse(random_env, other)
    k = 2.9
    f2 = fuse(EnvironmentMap(k * random_env.pixels), EnvironmentMap(k * other.pixels))
    assert np.allclose(f2.pixels, k * f1.pixels, rtol=1e-10)


def test_fuse_preserves_chroma(random_env, rng):
    other = EnvironmentMap(0.05 + rng.random((16, 32, 3)))
    fused = fuse(random_env, other)
    ratio = fused.pixels / np.maximum(random_env.pixels, 1e-12)
    # per-pixel scale is shared across channels
    assert np.allclose(ratio[:, :, 0], ratio[:, :, 1], rtol=1e-9)
    assert np.allclose(ratio[:, :, 0], ratio[:, :, 2], rtol=1e-9)


def test_blend_endpoints(random_env, rng):
    other = EnvironmentMap(0.05 + rng.random((16, 32, 3)))
    a0, b0 = blend_scheduled(random_env, other, 0.0)
    assert np.array_equal(a0.pixels, random_env.pixels)
    assert np.array_equal(b0.pixels, other.pixels)
    a1, b1 = blend_scheduled(random_env, other, 1.0)
    fused = fuse(random_env, other)
    assert np.allclose(a1.pixels, fused.pixels)
    assert np.allclose(b1.pixels, fused.pixels)
    assert np.allclose(a1.pixels, b1.pixels)


def test_blend_fixed_point(random_env):
    a, b = blend_scheduled(random_env, random_env, 0.5)
    assert np.allclose(a.pixels, random_env.pixels, rtol=1e-12)
    assert np.allclose(b.pixels, random_env.pixels, rtol=1e-12)


def test_blend_rejects_bad_s(random_env):
    with pytest.raises(ValueError):
        blend_scheduled(random_env, random_env, 1.5)


# ---------------------------------------------------------------------------
# initialization


def test_fibonacci_sphere_unit():
    v = fibonacci_sphere(64)
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0)


def test_init_lighting_matches_target_mean():
    L = init_lighting(16, target_mean_luminance=0.31, H=32, W=64)
    env = envmap_bake(L, 32, 64)
    assert np.isclose(env.luminance().mean(), 0.31, rtol=1e-6)
