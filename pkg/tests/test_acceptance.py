"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line with its measured quantities. Tolerances are fixed here and
mirror the verification plan; see the README for the full listing.

Heavy criteria (recovery, unbiasedness) run at the documented desk scale:
64x96 at 16 spp for the optimization runs, 512 seeds for the estimator mean.
"""

import json
import os
import subprocess
import sys
import numpy as np
import pytest

from dropin.guidance import (
    GuidanceConfig,
    NoiseSchedule,
    PhotometricOracle,
    lds_grad_image,
    sds_grad_image,
    strength_schedule,
    stub_eps_cond,
    stub_eps_uncond,
)
from dropin.lightfield import (
    EnvironmentMap,
    SgLightingParams,
    blend_scheduled,
    envmap_bake,
    fuse,
)
from dropin.metrics import (
    derive_ref_seed,
    render_background,
    render_reference,
    rmse,
    si_rmse,
    ssim,
)
from dropin.optimizer import (
    OptimConfig,
    _final_outputs,
    build_state,
    fusion_progress,
    run_optimization,
)
from dropin.scenegraph import Camera, MaterialParams, ProxyPlane, Scene
from dropin.shapes import disk_mesh, make_toy_scene, quad_mesh, save_obj, icosphere
from dropin.tonemap import RqSpline
from dropin.tracer import RenderSettings, render_foreground, render_shadow_ratio


def _report(name, ok, detail=""):
    print(f"\n[ACCEPT] {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# gradient correctness


def test_acceptance_gradient_correctness():
    from dropin.gradcheck import run_all

    text, ok = run_all()
    _report("gradient-correctness", ok, text.splitlines()[-1])


# ---------------------------------------------------------------------------
# estimator unbiasedness


def test_acceptance_estimator_unbiasedness():
    lighting = SgLightingParams(
        np.log([[2.5, 2.0, 1.5], [0.8, 1.0, 1.4], [3.0, 2.8, 2.4], [0.5, 0.45, 0.4]]),
        [[0.2, -0.3, 1.0], [-0.6, 0.5, 0.7], [0.1, 0.8, 0.4], [0.5, 0.2, -0.6]],
        np.log([0.3, 0.6, 0.2, 0.9]),
    )
    env = envmap_bake(lighting, 128, 256)
    cam = Camera.look_at((0, 0, 4.0), (0, 0, 0.8), up=(0, 1, 0), fov=np.radians(30), resolution=(4, 4))
    scene = Scene(
        quad_mesh(z=0.8, half=6.0),
        MaterialParams(base_color=np.array([1.0, 1.0, 1.0]), metallic=0.0, roughness=0.5),
        ProxyPlane(point=np.array([0, 0, -1.0])),
        cam,
    )
    acc = np.zeros(3)
    n_seeds = 512
    for seed in range(n_seeds):
        img = render_foreground(
            scene, env, RenderSettings(spp=16, mis_rays=2, max_depth=1, base_seed=seed)
        )
        acc += img.mean(axis=(0, 1))
    mc = acc / n_seeds

    # 1024x1024-node spherical quadrature of the same emitter (nearest lookup)
    nt, nphi = 1024, 1024
    theta_edges = np.pi * np.arange(nt + 1) / nt
    dphi = 2 * np.pi / nphi
    band = (np.cos(theta_edges[:-1]) - np.cos(theta_edges[1:])) * dphi
    theta_c = 0.5 * (theta_edges[:-1] + theta_edges[1:])
    cosw = np.maximum(np.cos(theta_c), 0.0)
    i_env = np.clip((theta_c * env.height / np.pi).astype(int), 0, env.height - 1)
    phi_c = (np.arange(nphi) + 0.5) * dphi
    j_env = np.clip((phi_c * env.width / (2 * np.pi)).astype(int), 0, env.width - 1)
    L_nodes = env.pixels[np.ix_(i_env, j_env)]
    quad = (L_nodes * (band * cosw)[:, None, None]).sum(axis=(0, 1)) / np.pi

    rel = np.max(np.abs(mc - quad) / quad)
    _report(
        "estimator-unbiasedness",
        rel <= 0.01,
        f"mc={np.array2string(mc, precision=4)} quad={np.array2string(quad, precision=4)} rel={rel:.4f}",
    )


# ---------------------------------------------------------------------------
# shadow-ratio sanity


def test_acceptance_shadow_ratio_sanity():
    cam = Camera.look_at((0, -3, 2.0), (0, 0, 0), fov=np.radians(40), resolution=(16, 24))
    empty = Scene(None, MaterialParams(), ProxyPlane(), cam)
    env = envmap_bake(
        SgLightingParams(np.log([[2.0, 2.0, 2.0]]), [[0.0, 0.0, 1.0]], [np.log(0.4)]), 64, 128
    )
    beta_empty = render_shadow_ratio(empty, env, RenderSettings(spp=16, mis_rays=2, base_seed=5))
    no_object_ok = bool(np.all(beta_empty == 1.0))

    cam2 = Camera.look_at((0, 0, 6.0), (0, 0, 0), up=(0, 1, 0), fov=np.radians(30), resolution=(17, 17))
    occluded = Scene(disk_mesh(1.2, (0, 0, 1.0), 64), MaterialParams(), ProxyPlane(), cam2)
    near_delta = envmap_bake(
        SgLightingParams(np.log([[4.0, 4.0, 4.0]]), [[0.0, 0.0, 1.0]], [np.log(0.08)]), 128, 256
    )
    beta_umbra = render_shadow_ratio(occluded, near_delta, RenderSettings(spp=32, mis_rays=4, base_seed=2))
    umbra = float(beta_umbra[8, 8].max())
    _report(
        "shadow-ratio-sanity",
        no_object_ok and umbra <= 0.01,
        f"no-object-bitwise-one={no_object_ok} umbra_beta={umbra:.5f}",
    )


# ---------------------------------------------------------------------------
# lighting recovery (self-consistency surrogate)


def _gt_lighting(seed):
    rng = np.random.default_rng(seed)
    axes = rng.normal(size=(4, 3))
    axes[:, 2] = np.abs(axes[:, 2]) + 0.5
    return SgLightingParams(
        rng.uniform(np.log(0.5), np.log(6.0), (4, 3)),
        axes,
        rng.uniform(np.log(0.15), np.log(0.6), 4),
    )


def _recovery_config(seed):
    # the oracle-driven toy recovery is well posed: the lighting regularizers
    # (shaped for the ill-posed guided problem) stay off, and the final
    # composite renders at higher spp than the 16-spp optimization renders
    return OptimConfig(
        iterations=600,
        seed=seed,
        n_lobes=8,
        env_height=64,
        env_width=128,
        lambda_consistency=0.0,
        lambda_reg=0.0,
        lr={"sg": 0.02, "tone": 0.005, "material": 0.01},
        render=RenderSettings(spp=16, mis_rays=2, max_depth=1),
        guidance=GuidanceConfig(crop_resolution=96),
        final_spp=96,
    )


def test_acceptance_lighting_recovery():
    lines = []
    ok_all = True
    for seed in range(5):
        scene = make_toy_scene(resolution=(64, 96), sphere=True)
        env_gt = envmap_bake(_gt_lighting(seed + 100), 64, 128)
        bg = render_background(env_gt, scene.camera)
        reference = render_reference(
            scene, env_gt,
            RenderSettings(spp=96, mis_rays=2, max_depth=1, base_seed=derive_ref_seed(seed)),
            bg,
        )
        config = _recovery_config(seed)
        state = build_state(scene, bg, config)
        _, _, comp0, *_ = _final_outputs(state, scene, bg, config, None)
        init_rmse = rmse(comp0, reference)
        result = run_optimization(scene, bg, config, PhotometricOracle(reference, 96))
        final_rmse = rmse(result.composite_image, reference)
        final_si = si_rmse(result.composite_image, reference)
        ok = final_rmse <= 0.02 and init_rmse / final_rmse >= 10.0 and final_si <= final_rmse
        ok_all &= ok
        lines.append(
            f"seed {seed}: init={init_rmse:.4f} final={final_rmse:.4f} "
            f"({init_rmse / final_rmse:.1f}x) si={final_si:.4f} {'ok' if ok else 'FAIL'}"
        )
        print(f"\n[accept/recovery] {lines[-1]}")
    _report("lighting-recovery", ok_all, "; ".join(lines))


# ---------------------------------------------------------------------------
# distillation math


def test_acceptance_distillation_math(rng):
    sch = NoiseSchedule()
    z = rng.random((6, 6, 3))
    noise = rng.normal(size=(6, 6, 3))
    t = 500
    a, s_ = sch.alpha[t], sch.sigma[t]
    z_t = a * z + s_ * noise
    cfg = GuidanceConfig(cfg_scale=7.5)
    sds = sds_grad_image(z, stub_eps_cond, stub_eps_uncond, t, noise, cfg, sch)
    sds_expect = a * (8.5 * (0.35 * z_t + 0.05) - 7.5 * (0.30 * z_t - 0.02) - noise)
    lds = lds_grad_image(z, stub_eps_cond, stub_eps_uncond, t, noise, GuidanceConfig(), sch)
    lds_expect = a * (0.05 * z_t + 0.07)
    err_sds = float(np.max(np.abs(sds - sds_expect)))
    err_lds = float(np.max(np.abs(lds - lds_expect)))

    # degeneracies: perfect denoiser at s=0; identical adapted/base models
    zero1 = sds_grad_image(z, lambda zt, tt: noise, None, t, noise, GuidanceConfig(cfg_scale=0.0), sch)
    eps = lambda zt, tt: 0.4 * zt + 0.1
    zero2 = lds_grad_image(z, eps, eps, t, noise, GuidanceConfig(), sch)
    ok = (
        err_sds <= 1e-6
        and err_lds <= 1e-6
        and np.all(zero1 == 0.0)
        and np.all(zero2 == 0.0)
    )
    _report("distillation-math", ok, f"sds_err={err_sds:.2e} lds_err={err_lds:.2e}")


# ---------------------------------------------------------------------------
# fusion schedule


def test_acceptance_fusion_schedule(rng):
    a = EnvironmentMap(0.05 + rng.random((16, 32, 3)))
    b = EnvironmentMap(0.05 + rng.random((16, 32, 3)))
    a0, b0 = blend_scheduled(a, b, 0.0)
    identity = np.array_equal(a0.pixels, a.pixels) and np.array_equal(b0.pixels, b.pixels)
    a1, b1 = blend_scheduled(a, b, 1.0)
    fused = fuse(a, b)
    both_fused = np.allclose(a1.pixels, fused.pixels) and np.allclose(b1.pixels, fused.pixels)
    am, bm = blend_scheduled(a, a, 0.5)
    fixed = np.allclose(am.pixels, a.pixels, rtol=1e-12) and np.allclose(bm.pixels, a.pixels, rtol=1e-12)
    _report(
        "fusion-schedule",
        identity and both_fused and fixed,
        f"s0-identity={identity} s1-fused={both_fused} fixed-point={fixed}",
    )


# ---------------------------------------------------------------------------
# spline suite


def test_acceptance_spline_suite(rng):
    x = np.linspace(0, 1, 100)
    ident_err = float(np.max(np.abs(RqSpline().evaluate(x) - x)))
    ok = ident_err <= 1e-6
    grid = np.linspace(0, 1 - 1e-4, 400)
    for _ in range(100):
        sp = RqSpline(rng.normal(0, 1.5, 14))
        ok &= abs(float(sp.evaluate(np.array(0.0)))) < 1e-12
        ok &= abs(float(sp.evaluate(np.array(1.0))) - 1.0) < 1e-12
        ok &= bool(np.all(sp.evaluate(grid + 1e-4) > sp.evaluate(grid)))
    _report("spline-suite", ok, f"identity_max_err={ident_err:.2e}")


# ---------------------------------------------------------------------------
# schedules


def test_acceptance_schedules():
    cfg = GuidanceConfig()
    s0 = strength_schedule(0, 600, cfg)
    s1 = strength_schedule(600, 600, cfg)
    oc = OptimConfig(iterations=600)
    f0 = fusion_progress(oc.fusion_start, oc)
    f1 = fusion_progress(oc.fusion_end, oc)
    ok = s0 == 0.6 and s1 == 0.3 and f0 == 0.0 and f1 == 1.0
    _report("schedules", ok, f"strength=({s0},{s1}) fusion=({f0},{f1})")


# ---------------------------------------------------------------------------
# determinism across runs and thread counts


def test_acceptance_determinism(tmp_path):
    root = tmp_path
    save_obj(root / "ball.obj", icosphere(2, 0.45, (0.0, 0.0, 0.6)))
    from dropin.imageio import write_pfm

    env = envmap_bake(
        SgLightingParams(
            np.log([[2.5, 2.0, 1.6], [0.5, 0.6, 0.8]]),
            [[0.3, -0.3, 1.0], [-0.4, 0.5, 0.9]],
            np.log([0.25, 0.7]),
        ),
        32, 64,
    )
    write_pfm(root / "env.pfm", env.pixels)
    (root / "scene.json").write_text(json.dumps({
        "mesh": "ball.obj",
        "camera": {"position": [0, -2.8, 1.8], "look_at": [0, 0, 0.45],
                   "fov_deg": 38.0, "resolution": [32, 48]},
    }))

    def run(out, threads):
        env_vars = dict(os.environ)
        env_vars["NUMBA_NUM_THREADS"] = str(threads)
        env_vars.pop("DIPIR_THREADS", None)
        cmd = [
            sys.executable, "-m", "dropin.cli", "render",
            "--scene", str(root / "scene.json"), "--env-map", str(root / "env.pfm"),
            "--spp", "16", "--mis-rays", "2", "--depth", "2", "--seed", "31",
            "--threads", str(threads), "--out-dir", str(out),
        ]
        r = subprocess.run(cmd, env=env_vars, capture_output=True, text=True, timeout=600)
        assert r.returncode == 0, r.stderr
        return {
            name: (out / name).read_bytes()
            for name in ("foreground.pfm", "beta.pfm", "composite.png")
        }

    a = run(root / "t1_run1", 1)
    b = run(root / "t1_run2", 1)
    c = run(root / "t4_run1", 4)
    repeat_ok = a == b
    threads_ok = a == c
    _report(
        "determinism",
        repeat_ok and threads_ok,
        f"repeat-bitwise={repeat_ok} threads-1-vs-4-bitwise={threads_ok}",
    )


# ---------------------------------------------------------------------------
# metric oracles


def test_acceptance_metric_oracles(rng):
    a = rng.random((24, 32, 3))
    b = np.clip(a + 0.07 * rng.normal(size=a.shape), 0, 1)

    naive_rmse = np.sqrt(sum(
        (a[i, j, c] - b[i, j, c]) ** 2 for i in range(24) for j in range(32) for c in range(3)
    ) / a.size)
    rmse_err = abs(rmse(a, b) - naive_rmse)

    # dense scan over the scale for the si-rmse oracle
    coarse = np.linspace(0.0, 3.0, 751)
    al0 = coarse[int(np.argmin([np.sqrt(np.mean((al * a - b) ** 2)) for al in coarse]))]
    fine = np.linspace(al0 - 0.02, al0 + 0.02, 4001)
    best = min(np.sqrt(np.mean((al * a - b) ** 2)) for al in fine)
    si_err = abs(si_rmse(a, b) - best)
    si_scale_zero = si_rmse(3.3 * b, b)

    from dropin.metrics import _gaussian_window
    w2 = np.outer(_gaussian_window(11, 1.5), _gaussian_window(11, 1.5))
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(3):
        x, y = a[:, :, ch], b[:, :, ch]
        for i in range(24 - 10):
            for j in range(32 - 10):
                xx = x[i : i + 11, j : j + 11]
                yy = y[i : i + 11, j : j + 11]
                mx, my = (w2 * xx).sum(), (w2 * yy).sum()
                vx = (w2 * xx * xx).sum() - mx**2
                vy = (w2 * yy * yy).sum() - my**2
                cxy = (w2 * xx * yy).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                            / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    ssim_err = abs(ssim(a, b) - np.mean(vals))

    ok = rmse_err <= 1e-6 and si_err <= 1e-6 and ssim_err <= 1e-6 and si_scale_zero <= 1e-12
    _report(
        "metric-oracles",
        ok,
        f"rmse_err={rmse_err:.2e} si_err={si_err:.2e} ssim_err={ssim_err:.2e} si(k*I,I)={si_scale_zero:.2e}",
    )
