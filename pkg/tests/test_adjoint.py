import numpy as np
import pytest

from dropin.adjoint import ParamVector, finite_diff_check, render_vjp
from dropin.gradcheck import check_render_chain, toy_scene
from dropin.lightfield import SgLightingParams, envmap_bake
from dropin.tracer import RenderSettings, render_foreground, render_foreground_vjp

from conftest import random_lighting


# ---------------------------------------------------------------------------
# ParamVector


def test_param_vector_layout_and_round_trip(rng):
    pv = ParamVector([("a", 3), ("b", 5), ("c", 2)])
    assert pv.size == 10
    offs = [pv.segments[k][0] for k in ("a", "b", "c")]
    assert offs == [0, 3, 8]
    pv.set("b", np.arange(5.0))
    parts = pv.unflatten()
    back = ParamVector.flatten(parts, [("a", 3), ("b", 5), ("c", 2)])
    assert np.array_equal(back.values, pv.values)


def test_param_vector_rejects_bad_segment():
    pv = ParamVector([("a", 3)])
    with pytest.raises(ValueError):
        pv.set("a", np.zeros(4))


# ---------------------------------------------------------------------------
# finite_diff_check


def test_fd_check_quadratic_passes():
    A = np.diag([1.0, 2.0, 3.0])

    def loss(p):
        return 0.5 * float(p @ A @ p), A @ p

    rep = finite_diff_check(loss, np.array([0.3, -0.7, 1.1]), h=1e-5, tolerance=1e-8)
    assert rep.passed


def test_fd_check_flags_corrupted_gradient():
    def loss(p):
        return float(p @ p), 2 * p + 0.05  # biased gradient

    rep = finite_diff_check(loss, np.array([0.4, -0.2]), h=1e-5, tolerance=1e-6)
    assert not rep.passed
    assert len(rep.failures) == 2
    assert "FAIL" in str(rep)


# ---------------------------------------------------------------------------
# render_vjp


def test_zero_upstream_zero_gradient(rng):
    scene = toy_scene((6, 6))
    L = random_lighting(rng, 2)
    st = RenderSettings(spp=4, mis_rays=2, max_depth=1, base_seed=5)
    g = render_vjp(scene, L, st, upstream_fg=np.zeros((6, 6, 3)), env_hw=(8, 16))
    assert np.all(g.values == 0.0)


def test_depth1_gradient_linear_in_color_exact(rng):
    # at depth 1 the estimator is linear in each lobe's linear color, so the
    # analytic d/dc matches finite differences essentially to roundoff
    scene = toy_scene((6, 6))
    L = random_lighting(rng, 2)
    H, W = 8, 16
    st = RenderSettings(spp=8, mis_rays=2, max_depth=1, base_seed=5)
    smap = envmap_bake(L, H, W)
    u = rng.normal(size=(6, 6, 3))

    env_grad, _ = render_foreground_vjp(scene, smap, st, u, sample_map=smap)
    from dropin.lightfield import envmap_bake_vjp

    g_log = envmap_bake_vjp(L, H, W, env_grad)  # d/d log_color in cols 0:3
    c = np.exp(L.log_color)

    for k in range(L.n_lobes):
        for ch in range(3):
            analytic_dc = g_log[k, ch] / c[k, ch]
            h = max(1e-6 * c[k, ch], 1e-9)
            Lp = SgLightingParams(L.log_color.copy(), L.axis_raw, L.log_sharpness)
            Lp.log_color[k, ch] = np.log(c[k, ch] + h)
            Lm = SgLightingParams(L.log_color.copy(), L.axis_raw, L.log_sharpness)
            Lm.log_color[k, ch] = np.log(c[k, ch] - h)
            ip = render_foreground(scene, envmap_bake(Lp, H, W), st, sample_map=smap)
            im = render_foreground(scene, envmap_bake(Lm, H, W), st, sample_map=smap)
            numeric = float((u * (ip - im)).sum()) / (2 * h)
            denom = max(abs(analytic_dc), abs(numeric), 1e-10)
            assert abs(analytic_dc - numeric) / denom < 1e-6


def test_full_chain_matches_finite_differences():
    (name, rep), = check_render_chain()
    assert rep.passed, str(rep)
    assert rep.max_rel_error <= 1e-3


def test_material_chain_matches_finite_differences():
    (name, rep), = check_render_chain(include_material=True)
    assert rep.passed, str(rep)


def test_beta_gradient_ignores_foreground_lighting(rng):
    # before fusion (s=0) the shadow path never touches the foreground SG set
    from dropin.guidance import PhotometricOracle, GuidanceConfig
    from dropin.optimizer import OptimConfig, build_state, total_loss_grad
    from dropin.shapes import make_toy_scene
    from dropin.tracer import visibility_mask

    scene = make_toy_scene(resolution=(16, 24))
    bg = rng.uniform(0.2, 0.8, (16, 24, 3))
    config = OptimConfig(
        iterations=10, seed=3, n_lobes=2, env_height=8, env_width=16,
        fusion_start=10, fusion_end=10,  # s stays 0 during iteration 0
        render=RenderSettings(spp=4, mis_rays=2, max_depth=1),
        guidance=GuidanceConfig(crop_resolution=32),
        lambda_consistency=0.0, lambda_reg=0.0,
    )
    state = build_state(scene, bg, config)
    vis = visibility_mask(scene, RenderSettings(spp=4, mis_rays=2, max_depth=1, base_seed=0))
    from scipy.ndimage import binary_dilation

    # margin: the bilinear resize-transpose spreads crop gradients ~1 source px
    keep_out = binary_dilation(vis > 0, iterations=4)

    class ShadowOnlyProvider:
        def gradient(self, crop, rect, iteration, t_frac, seed):
            from dropin.guidance import GuidanceResult

            i0, i1, j0, j1 = rect
            s = crop.shape[0]
            src_i = np.clip(((np.arange(s) + 0.5) * (i1 - i0) / s - 0.5 + i0).round().astype(int), 0, vis.shape[0] - 1)
            src_j = np.clip(((np.arange(s) + 0.5) * (j1 - j0) / s - 0.5 + j0).round().astype(int), 0, vis.shape[1] - 1)
            g = np.ones_like(crop)
            g[keep_out[np.ix_(src_i, src_j)]] = 0.0
            return GuidanceResult(gradient=g, loss=0.0, rect=rect)

    grad, diag = total_loss_grad(state, scene, bg, ShadowOnlyProvider(), config)
    assert diag["s"] == 0.0
    assert np.all(grad.get("sg_fg") == 0.0)
    assert np.any(grad.get("sg_shadow") != 0.0)


def test_render_vjp_material_segments(rng):
    scene = toy_scene((6, 6))
    L = random_lighting(rng, 2)
    st = RenderSettings(spp=4, mis_rays=2, max_depth=1, base_seed=5)
    u = rng.normal(size=(6, 6, 3))
    g = render_vjp(scene, L, st, upstream_fg=u, env_hw=(8, 16),
                   material_raw=np.array([0.7, 0.6, 0.5, 0.3, 0.5, 0.1, 0.1, 0.1]))
    assert g.get("sg").shape == (14,)
    assert np.any(g.get("material") != 0.0)
