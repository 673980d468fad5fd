"""Finite-difference verification suites.

Suite (a): every hand-derived VJP in lightfield and tonemap against central
differences at h=1e-4, relative tolerance 1e-4.

Suite (b): the full render -> tone -> composite -> photometric-loss chain on
a tiny fixed-seed scene (8x8, 4 lobes, 16 spp), tolerance 1e-3. The chain
holds every sampling decision at the base point (frozen sampling maps and
frozen sampling material), which is exactly the detached-sampling estimator
the adjoint differentiates.
"""

import numpy as np

from .adjoint import FdReport, ParamVector, finite_diff_check
from .guidance import extract_crop, embed_crop_grad
from .lightfield import (
    EnvironmentMap,
    SgLightingParams,
    SgLobe,
    blend_scheduled,
    blend_scheduled_vjp,
    cauchy_reg,
    cauchy_reg_grad,
    consistency_loss,
    consistency_loss_grad,
    envmap_bake,
    envmap_bake_vjp,
    fuse,
    fuse_vjp,
    normalized_luminance,
    _normalized_luminance_vjp,
    sg_eval,
    sg_eval_vjp,
)
from .scenegraph import Camera, MaterialParams, ProxyPlane, Scene, clamp_packed_material
from .tonemap import (
    RqSpline,
    ToneParams,
    apply_fg_tone,
    apply_fg_tone_vjp,
    apply_shadow_tone,
    apply_shadow_tone_vjp,
    reinhard,
    reinhard_deriv,
)
from .tracer import (
    RenderSettings,
    composite,
    render_foreground,
    render_foreground_vjp,
    render_shadow_ratio,
    render_shadow_ratio_vjp,
    visibility_mask,
)


def _rand_env(rng, h=8, w=16, scale=1.0):
    return EnvironmentMap(scale * (0.05 + rng.random((h, w, 3))))


def check_sg_eval(seed=0, n_lobes=20, n_dirs=20, h=1e-4, tol=1e-4):
    rng = np.random.default_rng(seed)
    reports = []
    for k in range(n_lobes):
        lobe0 = SgLobe(
            rng.normal(0, 0.5, 3),
            rng.normal(0, 1.0, 3) + np.array([0, 0, 1.5]),
            float(rng.uniform(np.log(0.05), np.log(1.5))),
        )
        for _ in range(max(1, n_dirs // n_lobes)):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            u = rng.normal(size=3)

            def loss(p, v=v, u=u):
                lobe = SgLobe(p[0:3], p[3:6], float(p[6]))
                return float(u @ sg_eval(lobe, v)), sg_eval_vjp(lobe, v, u)

            p0 = np.concatenate([lobe0.log_color, lobe0.axis_raw, [lobe0.log_sharpness]])
            reports.append((f"sg_eval[{k}]", finite_diff_check(loss, p0, h, tol)))
    return reports


def check_bake(seed=1, h=1e-4, tol=1e-4):
    rng = np.random.default_rng(seed)
    n, H, W = 3, 8, 16
    u = rng.normal(size=(H, W, 3))
    p0 = np.concatenate(
        [
            np.stack([rng.normal(0, 0.4, 3) for _ in range(n)]),
            np.stack([rng.normal(0, 1.0, 3) + [0, 0, 1] for _ in range(n)]),
            rng.uniform(np.log(0.2), np.log(1.0), (n, 1)),
        ],
        axis=1,
    ).ravel()

    def loss(p):
        params = SgLightingParams.from_flat(p)
        env = envmap_bake(params, H, W)
        return float((u * env.pixels).sum()), envmap_bake_vjp(params, H, W, u).ravel()

    return [("envmap_bake", finite_diff_check(loss, p0, h, tol))]


def _map_loss_factory(op, grad_op, u_shape, rng, n_env=2):
    """Wrap a map op as loss over pixel parameters for fd checking."""
    envs = [_rand_env(rng) for _ in range(n_env)]
    u = rng.normal(size=u_shape) if u_shape else None
    shapes = [e.pixels.shape for e in envs]
    sizes = [int(np.prod(s)) for s in shapes]

    def loss(p):
        parts = []
        off = 0
        for s, n in zip(shapes, sizes):
            parts.append(EnvironmentMap(p[off : off + n].reshape(s)))
            off += n
        val = op(*parts)
        if u is not None:
            val_scalar = float((u * val).sum())
        else:
            val_scalar = float(val)
        grads = grad_op(*parts, u) if u is not None else grad_op(*parts)
        return val_scalar, np.concatenate([np.asarray(g).ravel() for g in grads])

    p0 = np.concatenate([e.pixels.ravel() for e in envs])
    return loss, p0


def check_map_ops(seed=2, h=1e-4, tol=1e-4):
    rng = np.random.default_rng(seed)
    reports = []

    loss, p0 = _map_loss_factory(
        lambda e: normalized_luminance(e),
        lambda e, u: (_normalized_luminance_vjp(e, u),),
        (8, 16),
        rng,
        n_env=1,
    )
    reports.append(("normalized_luminance", finite_diff_check(loss, p0, h, tol, coords=range(0, p0.size, 7))))

    loss, p0 = _map_loss_factory(
        lambda a, b: consistency_loss(a, b),
        lambda a, b: (consistency_loss_grad(a, b), np.zeros_like(b.pixels)),
        None,
        rng,
    )
    # gradient flows into the fg map only; shadow side is detached by contract
    reports.append(("consistency_loss", finite_diff_check(loss, p0, h, tol, coords=range(0, p0.size // 2, 7))))

    loss, p0 = _map_loss_factory(
        lambda e: cauchy_reg(e), lambda e: (cauchy_reg_grad(e),), None, rng, n_env=1
    )
    reports.append(("cauchy_reg", finite_diff_check(loss, p0, h, tol, coords=range(0, p0.size, 7))))

    loss, p0 = _map_loss_factory(
        lambda a, b: fuse(a, b).pixels,
        lambda a, b, u: fuse_vjp(a, b, u),
        (8, 16, 3),
        rng,
    )
    reports.append(("fuse", finite_diff_check(loss, p0, h, tol, coords=range(0, p0.size, 11))))

    rng2 = np.random.default_rng(seed + 1)
    s = 0.37
    u_fg = rng2.normal(size=(8, 16, 3))
    u_sh = rng2.normal(size=(8, 16, 3))

    def loss_blend(p):
        a = EnvironmentMap(p[: p.size // 2].reshape(8, 16, 3))
        b = EnvironmentMap(p[p.size // 2 :].reshape(8, 16, 3))
        oa, ob = blend_scheduled(a, b, s)
        ga, gb = blend_scheduled_vjp(a, b, s, u_fg, u_sh)
        return float((u_fg * oa.pixels).sum() + (u_sh * ob.pixels).sum()), np.concatenate(
            [ga.ravel(), gb.ravel()]
        )

    p0 = np.concatenate([_rand_env(rng2).pixels.ravel(), _rand_env(rng2).pixels.ravel()])
    reports.append(("blend_scheduled", finite_diff_check(loss_blend, p0, h, tol, coords=range(0, p0.size, 11))))
    return reports


def check_tonemap(seed=3, h=1e-4, tol=1e-4):
    rng = np.random.default_rng(seed)
    reports = []

    raw0 = rng.normal(0, 0.7, RqSpline(n_bins=5).n_params)
    xs = rng.uniform(0.02, 0.98, 40)
    u = rng.normal(size=40)

    def loss_params(p):
        sp = RqSpline(p)
        _, graw = sp.vjp(xs, u)
        return float((u * sp.evaluate(xs)).sum()), graw

    reports.append(("rq_spline_params", finite_diff_check(loss_params, raw0, h, tol)))

    sp_fixed = RqSpline(raw0)

    def loss_x(p):
        gx, _ = sp_fixed.vjp(p, u)
        return float((u * sp_fixed.evaluate(p)).sum()), gx

    reports.append(("rq_spline_input", finite_diff_check(loss_x, xs.copy(), h, tol)))

    img = rng.uniform(0.05, 3.0, (4, 5, 3))
    u_img = rng.normal(size=(4, 5, 3))
    tone0 = ToneParams.from_raw(
        rng.normal(0, 0.5, 14), rng.normal(0, 0.5, 42)
    )

    def loss_fg(p):
        tone = ToneParams.from_raw(p[:14], tone0.shadow_raw())
        out = apply_fg_tone(img, tone)
        g_img, graw = apply_fg_tone_vjp(img, tone, u_img)
        return float((u_img * out).sum()), graw

    reports.append(("apply_fg_tone_params", finite_diff_check(loss_fg, tone0.fg_raw(), h, tol)))

    def loss_fg_img(p):
        tone = tone0
        im = p.reshape(4, 5, 3)
        out = apply_fg_tone(im, tone)
        g_img, _ = apply_fg_tone_vjp(im, tone, u_img)
        return float((u_img * out).sum()), g_img.ravel()

    reports.append(("apply_fg_tone_image", finite_diff_check(loss_fg_img, img.ravel(), h, tol)))

    beta = rng.uniform(0.05, 0.95, (4, 5, 3))

    def loss_sh(p):
        tone = ToneParams.from_raw(tone0.fg_raw(), p)
        out = apply_shadow_tone(beta, tone)
        _, graw = apply_shadow_tone_vjp(beta, tone, u_img)
        return float((u_img * out).sum()), graw

    reports.append(("apply_shadow_tone_params", finite_diff_check(loss_sh, tone0.shadow_raw(), h, tol)))

    def loss_sh_beta(p):
        b = p.reshape(4, 5, 3)
        out = apply_shadow_tone(b, tone0)
        gb, _ = apply_shadow_tone_vjp(b, tone0, u_img)
        return float((u_img * out).sum()), gb.ravel()

    reports.append(("apply_shadow_tone_input", finite_diff_check(loss_sh_beta, beta.ravel(), h, tol)))
    return reports


# ---------------------------------------------------------------------------
# full-chain check


def toy_scene(resolution=(8, 8), sphere=False, material=None):
    from .shapes import icosphere, quad_mesh

    mesh = icosphere(1, 0.45, (0.0, 0.0, 0.8)) if sphere else quad_mesh(z=0.8, half=0.45)
    cam = Camera.look_at(
        position=(0.0, -2.6, 2.0),
        target=(0.0, 0.0, 0.6),
        up=(0.0, 0.0, 1.0),
        fov=np.radians(35.0),
        resolution=resolution,
    )
    return Scene(
        object_mesh=mesh,
        material=material or MaterialParams(base_color=np.array([0.75, 0.6, 0.5]), roughness=0.6),
        plane=ProxyPlane(half_extent=np.array([6.0, 6.0])),
        camera=cam,
    )


def chain_loss_factory(seed=11, resolution=(8, 8), n_lobes=4, spp=16, env_hw=(16, 32),
                       blend_s=0.4, lam_c=0.03, lam_r=0.01, include_material=False):
    """Deterministic end-to-end scalar loss with hand-chained gradient.

    Returns (loss_fn, p0, segments). All sampling decisions (env CDF, pdfs,
    BSDF lobe choices) are frozen at the base point so the estimator is a
    smooth function of the parameters.
    """
    rng = np.random.default_rng(seed)
    H, W = env_hw
    scene = toy_scene(resolution)
    settings = RenderSettings(spp=spp, mis_rays=2, max_depth=2, base_seed=seed)

    n7 = n_lobes * 7
    sg0 = np.concatenate(
        [
            np.concatenate(
                [rng.normal(0, 0.4, 3), rng.normal(0, 1.0, 3) + [0, 0, 1.2],
                 [rng.uniform(np.log(0.3), np.log(0.9))]]
            )
            for _ in range(n_lobes)
        ]
    )
    sg1 = sg0 + rng.normal(0, 0.15, n7)
    tone_fg0 = rng.normal(0, 0.4, 14)
    tone_sh0 = rng.normal(0, 0.4, 42)
    segments = {"sg_fg": n7, "sg_shadow": n7, "tone_fg": 14, "tone_shadow": 42}
    parts = {"sg_fg": sg0, "sg_shadow": sg1, "tone_fg": tone_fg0, "tone_shadow": tone_sh0}
    mat_raw0 = None
    if include_material:
        mat_raw0 = np.array([0.6, 0.55, 0.5, 0.35, 0.45, 0.2, 0.15, 0.1])
        segments["material"] = 5
        segments["emission"] = 3
        parts["material"] = mat_raw0[:5]
        parts["emission"] = mat_raw0[5:]
    pv0 = ParamVector.flatten(parts, list(segments.items()))

    # freeze every detached branch at the base point: sampling maps, sampling
    # material, and the consistency loss' shadow distribution
    base_fg = SgLightingParams.from_flat(sg0)
    base_sh = SgLightingParams.from_flat(sg1)
    env_sh_base = envmap_bake(base_sh, H, W)
    smap_fg, smap_sh = blend_scheduled(envmap_bake(base_fg, H, W), env_sh_base, blend_s)
    mat_sample = clamp_packed_material(mat_raw0)[0] if include_material else None
    ls_frozen = normalized_luminance(env_sh_base)

    vis = visibility_mask(scene, settings)
    rows, cols = resolution
    bg = rng.uniform(0.1, 0.9, (rows, cols, 3))
    rect = (0, rows, 0, cols)
    crop_res = 2 * rows

    def make_loss(ref_crop):
        def loss_fn(vec):
            pv = ParamVector(list(segments.items()), vec)
            lobes_fg = SgLightingParams.from_flat(pv.get("sg_fg"))
            lobes_sh = SgLightingParams.from_flat(pv.get("sg_shadow"))
            tone = ToneParams.from_raw(pv.get("tone_fg"), pv.get("tone_shadow"))
            if include_material:
                raw = np.concatenate([pv.get("material"), pv.get("emission")])
                mat_vals, mat_gate = clamp_packed_material(raw)
            else:
                mat_vals, mat_gate = None, None

            env_fg = envmap_bake(lobes_fg, H, W)
            env_sh = envmap_bake(lobes_sh, H, W)
            env_fg_r, env_sh_r = blend_scheduled(env_fg, env_sh, blend_s)

            i_fg = render_foreground(scene, env_fg_r, settings, sample_map=smap_fg,
                                     material=mat_vals, material_sample=mat_sample)
            beta = render_shadow_ratio(scene, env_sh_r, settings, sample_map=smap_sh)
            fg_toned = apply_fg_tone(i_fg, tone)
            beta_toned = apply_shadow_tone(beta, tone)
            comp = composite(bg, fg_toned, beta_toned, vis)
            crop = extract_crop(comp, rect, crop_res)
            loss = 0.0
            g_crop = np.zeros_like(crop)
            if ref_crop is not None:
                diff = crop - ref_crop
                loss = float(np.mean(np.abs(diff)))
                g_crop = np.sign(diff) / diff.size
            # cross entropy against the frozen shadow distribution (the live
            # op detaches its shadow side, so the fd loss must freeze it too)
            lf = normalized_luminance(env_fg)
            dO = env_fg.delta_omega
            safe = np.maximum(lf, 1e-8)
            loss += lam_c * float(-(ls_frozen * np.log(safe) * dO).sum())
            loss += lam_r * cauchy_reg(env_sh)

            g_comp = embed_crop_grad(comp.shape, rect, g_crop)
            g_fg_toned = vis[:, :, None] * g_comp
            g_beta_toned = (1.0 - vis)[:, :, None] * bg * g_comp
            g_ifg, g_tone_fg = apply_fg_tone_vjp(i_fg, tone, g_fg_toned)
            g_beta, g_tone_sh = apply_shadow_tone_vjp(beta, tone, g_beta_toned)
            g_env_fg, g_mat = render_foreground_vjp(
                scene, env_fg_r, settings, g_ifg, sample_map=smap_fg,
                mat_gate=mat_gate, material=mat_vals, material_sample=mat_sample,
            )
            g_env_sh = render_shadow_ratio_vjp(scene, env_sh_r, settings, g_beta, sample_map=smap_sh)
            g_fg_pix, g_sh_pix = blend_scheduled_vjp(env_fg, env_sh, blend_s, g_env_fg, g_env_sh)
            d_lf = -(ls_frozen / safe) * (lf > 1e-8) * dO
            g_fg_pix = g_fg_pix + lam_c * _normalized_luminance_vjp(env_fg, d_lf)
            g_sh_pix = g_sh_pix + lam_r * cauchy_reg_grad(env_sh)

            grad = ParamVector(list(segments.items()))
            grad.set("sg_fg", envmap_bake_vjp(lobes_fg, H, W, g_fg_pix).ravel())
            grad.set("sg_shadow", envmap_bake_vjp(lobes_sh, H, W, g_sh_pix).ravel())
            grad.set("tone_fg", g_tone_fg)
            grad.set("tone_shadow", g_tone_sh)
            if include_material:
                grad.set("material", g_mat[:5])
                grad.set("emission", g_mat[5:])
            return loss, grad.values, crop

        return lambda vec: loss_fn(vec)[:2], loss_fn

    _, probe = make_loss(None)
    crop0 = probe(pv0.values)[2]
    # keep every reference pixel well clear of the base crop so the L1 kink
    # is never crossed by a +-h probe
    delta = rng.uniform(0.08, 0.35, crop0.shape)
    ref_crop = np.where(crop0 > 0.5, crop0 - delta, crop0 + delta)
    loss_fn, _ = make_loss(ref_crop)
    return loss_fn, pv0.values, segments


def check_render_chain(seed=11, h=1e-3, tol=1e-3, include_material=False):
    loss_fn, p0, _ = chain_loss_factory(seed=seed, include_material=include_material)
    return [("render_chain" + ("_material" if include_material else ""),
             finite_diff_check(loss_fn, p0, h, tol))]


def run_all(fast=False):
    """All suites; returns (text report, all passed)."""
    reports = []
    reports += check_sg_eval()
    reports += check_bake()
    reports += check_map_ops()
    reports += check_tonemap()
    if not fast:
        reports += check_render_chain()
        reports += check_render_chain(include_material=True)
    lines = []
    ok = True
    for name, rep in reports:
        ok &= rep.passed
        lines.append(f"[{'PASS' if rep.passed else 'FAIL'}] {name:<28} "
                     f"max_rel={rep.max_rel_error:.3e} n={rep.n_checked}")
        if not rep.passed:
            lines.append(str(rep))
    lines.append(f"gradcheck: {'ALL PASS' if ok else 'FAILURES PRESENT'}")
    return "\n".join(lines), ok
