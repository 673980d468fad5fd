"""End-to-end optimization: renders with the scheduled environment maps,
tones, composites, obtains a guidance gradient on a random crop, chains it
back through the adjoints, adds the two lighting regularizers, and applies
Adam with per-segment learning rates.

Modes: 'insertion' optimizes the two SG sets and both tone curves;
'material' freezes lighting and optimizes material/emission; 'tone_adjust'
freezes lighting and optimizes the tone curves only.
"""

import json
import numpy as np
from dataclasses import dataclass, field

from .adjoint import ParamVector
from .errors import GuidanceUnavailableError, NumericalFailureError
from .guidance import (
    GuidanceConfig,
    draw_timestep,
    embed_crop_grad,
    extract_crop,
    sample_crop,
)
from .lightfield import (
    EnvironmentMap,
    SgLightingParams,
    blend_scheduled,
    blend_scheduled_vjp,
    cauchy_reg,
    cauchy_reg_grad,
    consistency_loss,
    consistency_loss_grad,
    envmap_bake,
    envmap_bake_vjp,
    fuse,
    init_lighting,
    LUMA_WEIGHTS,
)
from .rng import derive_seed
from .scenegraph import MaterialParams, clamp_packed_material
from .tonemap import (
    ToneParams,
    apply_fg_tone,
    apply_fg_tone_vjp,
    apply_shadow_tone,
    apply_shadow_tone_vjp,
    srgb_decode,
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

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8

MODES = ("insertion", "material", "tone_adjust")


@dataclass
class OptimConfig:
    iterations: int = 600
    lambda_consistency: float = 0.03
    lambda_reg: float = 0.01
    lr: dict = field(default_factory=lambda: {"sg": 0.01, "tone": 0.005, "material": 0.01})
    fusion_start: int | None = None  # None -> iterations // 3 (200 at defaults)
    fusion_end: int | None = None    # None -> iterations   (600 at defaults)
    seed: int = 0
    mode: str = "insertion"
    n_lobes: int = 64
    env_height: int = 128
    env_width: int = 256
    render: RenderSettings = field(default_factory=RenderSettings)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    final_spp: int | None = None  # final composite quality; None -> render.spp

    def __post_init__(self):
        # 0 is allowed as a degenerate no-op run (returns the initialization)
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.lambda_consistency < 0 or self.lambda_reg < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.fusion_start is None:
            self.fusion_start = self.iterations // 3
        if self.fusion_end is None:
            self.fusion_end = self.iterations
        if not 0 <= self.fusion_start <= self.fusion_end <= self.iterations:
            raise ValueError("fusion window must lie within [0, iterations]")


@dataclass
class OptimState:
    params: ParamVector
    m: np.ndarray
    v: np.ndarray
    adam_t: int = 0
    iteration: int = 0
    s: float = 0.0
    diagnostics: list = field(default_factory=list)
    skipped: int = 0
    rejected: int = 0


@dataclass
class OptimResult:
    lighting_fg: SgLightingParams | None
    lighting_shadow: SgLightingParams | None
    fused_env: EnvironmentMap
    tone: ToneParams
    composite_image: np.ndarray
    diagnostics: list
    state: OptimState
    material: MaterialParams | None = None
    material_trajectory: list | None = None


def fusion_progress(iteration, config: OptimConfig):
    """0 before the window, linear to 1 at its end, clamped."""
    a, b = config.fusion_start, config.fusion_end
    if iteration <= a:
        return 0.0
    if iteration >= b:
        return 1.0
    return (iteration - a) / (b - a)


def _lr_for_segment(name, config: OptimConfig):
    group = {"sg_fg": "sg", "sg_shadow": "sg", "tone_fg": "tone",
             "tone_shadow": "tone", "material": "material", "emission": "material"}[name]
    enabled = {
        "insertion": ("sg", "tone"),
        "material": ("material",),
        "tone_adjust": ("tone",),
    }[config.mode]
    return config.lr.get(group, 0.0) if group in enabled else 0.0


def adam_step(state: OptimState, grad: ParamVector, config: OptimConfig):
    """Standard bias-corrected Adam; non-finite gradients reject the step."""
    g = grad.values
    if g.shape != state.params.values.shape:
        raise ValueError("gradient does not match parameter layout")
    if not np.all(np.isfinite(g)):
        state.rejected += 1
        return state
    lr = np.zeros_like(state.params.values)
    for name, (off, ln) in state.params.segments.items():
        lr[off : off + ln] = _lr_for_segment(name, config)
    state.adam_t += 1
    state.m = ADAM_B1 * state.m + (1.0 - ADAM_B1) * g
    state.v = ADAM_B2 * state.v + (1.0 - ADAM_B2) * g * g
    mhat = state.m / (1.0 - ADAM_B1**state.adam_t)
    vhat = state.v / (1.0 - ADAM_B2**state.adam_t)
    state.params.values -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return state


def _background_linear(background, resolution):
    bg = np.asarray(background)
    if bg.dtype == np.uint8:
        bg = srgb_decode(bg)
    bg = np.asarray(bg, dtype=np.float64)
    if bg.shape[:2] != tuple(resolution):
        raise ValueError(
            f"background resolution {bg.shape[:2]} does not match render resolution {tuple(resolution)}"
        )
    return bg


def build_state(scene, background_linear, config: OptimConfig, lighting_init=None):
    """Initial ParamVector per mode plus Adam moments."""
    n7 = config.n_lobes * 7
    tone = ToneParams()
    segments = {
        "sg_fg": n7,
        "sg_shadow": n7,
        "tone_fg": tone.n_fg_params,
        "tone_shadow": tone.n_shadow_params,
    }
    if config.mode == "material":
        segments["material"] = 5
        segments["emission"] = 3
    pv = ParamVector(segments)

    if lighting_init is None:
        mean_lum = float((background_linear @ LUMA_WEIGHTS).mean())
        lighting_init = init_lighting(
            config.n_lobes, target_mean_luminance=max(mean_lum, 1e-3),
            H=config.env_height, W=config.env_width,
        )
    if isinstance(lighting_init, SgLightingParams):
        flat = lighting_init.to_flat()
        pv.set("sg_fg", flat)
        pv.set("sg_shadow", flat)
    pv.set("tone_fg", tone.fg_raw())
    pv.set("tone_shadow", tone.shadow_raw())
    if config.mode == "material":
        packed = scene.material.packed()
        pv.set("material", packed[:5])
        pv.set("emission", packed[5:])
    return OptimState(params=pv, m=np.zeros(pv.size), v=np.zeros(pv.size))


def _unpack(state: OptimState, config: OptimConfig, fixed_env):
    """Current lobes / tone / material views of the parameter vector."""
    tone = ToneParams.from_raw(state.params.get("tone_fg"), state.params.get("tone_shadow"))
    if config.mode == "insertion":
        lobes_fg = SgLightingParams.from_flat(state.params.get("sg_fg"))
        lobes_sh = SgLightingParams.from_flat(state.params.get("sg_shadow"))
    else:
        lobes_fg = lobes_sh = None
    if config.mode == "material":
        raw = np.concatenate([state.params.get("material"), state.params.get("emission")])
        mat_vals, mat_gate = clamp_packed_material(raw)
    else:
        mat_vals, mat_gate = None, None
    return lobes_fg, lobes_sh, tone, mat_vals, mat_gate


def total_loss_grad(state: OptimState, scene, background_linear, provider,
                    config: OptimConfig, fixed_env: EnvironmentMap | None = None,
                    crop_rect=None):
    """One full forward + adjoint pass; returns (ParamVector grad, diagnostics).

    On guidance failure the returned gradient contains only the regularizer
    terms and the diagnostics row is flagged as skipped.
    """
    it = state.iteration
    lobes_fg, lobes_sh, tone, mat_vals, mat_gate = _unpack(state, config, fixed_env)

    if config.mode == "insertion":
        env_fg = envmap_bake(lobes_fg, config.env_height, config.env_width)
        env_sh = envmap_bake(lobes_sh, config.env_height, config.env_width)
        s = fusion_progress(it + 1, config)  # s hits 1 during the final iteration
        if s > 0.0:
            env_fg_r, env_sh_r = blend_scheduled(env_fg, env_sh, s)
        else:
            env_fg_r, env_sh_r = env_fg, env_sh
        consistency = consistency_loss(env_fg, env_sh) if config.lambda_consistency > 0 else 0.0
        reg = cauchy_reg(env_sh) if config.lambda_reg > 0 else 0.0
    else:
        if fixed_env is None:
            raise ValueError(f"mode {config.mode} needs a frozen environment map")
        env_fg_r = env_sh_r = fixed_env
        s = 0.0
        consistency = 0.0
        reg = 0.0

    settings = RenderSettings(
        spp=config.render.spp,
        mis_rays=config.render.mis_rays,
        max_depth=config.render.max_depth,
        resolution=config.render.resolution,
        base_seed=derive_seed(config.seed, it),
    )
    i_fg = render_foreground(scene, env_fg_r, settings, material=mat_vals)
    beta = render_shadow_ratio(scene, env_sh_r, settings)
    vis = visibility_mask(scene, settings)

    fg_toned = apply_fg_tone(i_fg, tone)
    beta_toned = apply_shadow_tone(beta, tone)
    comp = composite(background_linear, fg_toned, beta_toned, vis)

    rect = crop_rect if crop_rect is not None else sample_crop(vis, it, config.seed, config.guidance)
    crop = extract_crop(comp, rect, config.guidance.crop_resolution)
    t_frac = draw_timestep(it, config.iterations, config.seed, config.guidance)
    skipped = False
    provider_loss = None
    try:
        result = provider.gradient(
            crop, rect, it, t_frac, derive_seed(config.seed, it, 0x9E3779B9)
        )
        g_crop = np.asarray(result.gradient, dtype=np.float64)
        provider_loss = result.loss
        if g_crop.shape != crop.shape or not np.all(np.isfinite(g_crop)):
            raise GuidanceUnavailableError("provider returned an invalid gradient")
    except GuidanceUnavailableError:
        skipped = True
        g_crop = np.zeros_like(crop)

    grad = state.params.zeros_like()
    g_comp = embed_crop_grad(comp.shape, rect, g_crop)
    g_fg_toned = vis[:, :, None] * g_comp
    g_beta_toned = (1.0 - vis)[:, :, None] * background_linear * g_comp
    g_ifg, g_tone_fg = apply_fg_tone_vjp(i_fg, tone, g_fg_toned)
    g_beta, g_tone_sh = apply_shadow_tone_vjp(beta, tone, g_beta_toned)
    grad.set("tone_fg", g_tone_fg)
    grad.set("tone_shadow", g_tone_sh)

    need_env_grad = config.mode == "insertion"
    g_env_fg, g_mat = render_foreground_vjp(
        scene, env_fg_r, settings, g_ifg, mat_gate=mat_gate, material=mat_vals
    )
    if config.mode == "material":
        grad.set("material", g_mat[:5])
        grad.set("emission", g_mat[5:])
    if need_env_grad:
        g_env_sh = render_shadow_ratio_vjp(scene, env_sh_r, settings, g_beta)
        if s > 0.0:
            g_fg_pix, g_sh_pix = blend_scheduled_vjp(env_fg, env_sh, s, g_env_fg, g_env_sh)
        else:
            g_fg_pix, g_sh_pix = g_env_fg, g_env_sh
        if config.lambda_consistency > 0:
            g_fg_pix = g_fg_pix + config.lambda_consistency * consistency_loss_grad(env_fg, env_sh)
        if config.lambda_reg > 0:
            g_sh_pix = g_sh_pix + config.lambda_reg * cauchy_reg_grad(env_sh)
        grad.set("sg_fg", envmap_bake_vjp(lobes_fg, config.env_height, config.env_width, g_fg_pix).ravel())
        grad.set("sg_shadow", envmap_bake_vjp(lobes_sh, config.env_height, config.env_width, g_sh_pix).ravel())

    lds_term = provider_loss if provider_loss is not None else 0.0
    diagnostics = {
        "iteration": it,
        "total": lds_term + config.lambda_consistency * consistency + config.lambda_reg * reg,
        "lds": lds_term,
        "consistency": consistency,
        "reg": reg,
        "t_used": t_frac,
        "skipped": int(skipped),
        "s": s,
    }
    return grad, diagnostics


def _final_outputs(state, scene, background_linear, config, fixed_env):
    lobes_fg, lobes_sh, tone, mat_vals, _ = _unpack(state, config, fixed_env)
    if config.mode == "insertion":
        env_fg = envmap_bake(lobes_fg, config.env_height, config.env_width)
        env_sh = envmap_bake(lobes_sh, config.env_height, config.env_width)
        fused = fuse(env_fg, env_sh)
    else:
        fused = fixed_env
    settings = RenderSettings(
        spp=config.final_spp or config.render.spp, mis_rays=config.render.mis_rays,
        max_depth=config.render.max_depth, resolution=config.render.resolution,
        base_seed=derive_seed(config.seed, config.iterations),
    )
    i_fg = render_foreground(scene, fused, settings, material=mat_vals)
    beta = render_shadow_ratio(scene, fused, settings)
    vis = visibility_mask(scene, settings)
    comp = composite(
        background_linear, apply_fg_tone(i_fg, tone), apply_shadow_tone(beta, tone), vis
    )
    return fused, tone, comp, lobes_fg, lobes_sh


def _run_loop(scene, background, config, provider, lighting_init=None, fixed_env=None):
    settings_res = config.render.resolution or scene.camera.resolution
    bg = _background_linear(background, settings_res)
    state = build_state(scene, bg, config, lighting_init=lighting_init)
    trajectory = [] if config.mode == "material" else None
    for it in range(config.iterations):
        state.iteration = it
        grad, diag = total_loss_grad(state, scene, bg, provider, config, fixed_env=fixed_env)
        state.skipped += diag["skipped"]
        state.diagnostics.append(diag)
        adam_step(state, grad, config)
        state.s = max(state.s, diag["s"])
        if trajectory is not None:
            raw = np.concatenate([state.params.get("material"), state.params.get("emission")])
            vals, _ = clamp_packed_material(raw)
            trajectory.append(
                MaterialParams(vals[:3], float(vals[3]), float(vals[4]), vals[5:])
            )
        if not np.all(np.isfinite(state.params.values)):
            raise NumericalFailureError(f"parameters diverged at iteration {it}")
    if config.iterations > 0 and state.skipped / config.iterations > 0.5:
        err = GuidanceUnavailableError(
            f"{state.skipped}/{config.iterations} guidance steps were skipped"
        )
        err.diagnostics = state.diagnostics
        raise err
    fused, tone, comp, lobes_fg, lobes_sh = _final_outputs(state, scene, bg, config, fixed_env)
    material = None
    if config.mode == "material":
        raw = np.concatenate([state.params.get("material"), state.params.get("emission")])
        vals, _ = clamp_packed_material(raw)
        material = MaterialParams(vals[:3], float(vals[3]), float(vals[4]), vals[5:])
    return OptimResult(
        lighting_fg=lobes_fg,
        lighting_shadow=lobes_sh,
        fused_env=fused,
        tone=tone,
        composite_image=comp,
        diagnostics=state.diagnostics,
        state=state,
        material=material,
        material_trajectory=trajectory,
    )


def run_optimization(scene, background, config: OptimConfig, provider, lighting_init=None):
    """Full insertion-mode optimization; returns the fused lighting, tone
    curves, final composite and the per-iteration diagnostics series."""
    if config.mode != "insertion":
        raise ValueError("run_optimization expects mode='insertion'")
    return _run_loop(scene, background, config, provider, lighting_init=lighting_init)


def run_material_mode(scene, background, config: OptimConfig, provider, lighting):
    """Optimize material/emission only, under frozen lighting."""
    if config.mode != "material":
        raise ValueError("run_material_mode expects mode='material'")
    fixed = lighting if isinstance(lighting, EnvironmentMap) else envmap_bake(
        lighting, config.env_height, config.env_width
    )
    return _run_loop(scene, background, config, provider, fixed_env=fixed)


def run_tone_adjust_mode(scene, background, config: OptimConfig, provider, lighting):
    """Optimize the tone curves only, under frozen lighting."""
    if config.mode != "tone_adjust":
        raise ValueError("run_tone_adjust_mode expects mode='tone_adjust'")
    fixed = lighting if isinstance(lighting, EnvironmentMap) else envmap_bake(
        lighting, config.env_height, config.env_width
    )
    return _run_loop(scene, background, config, provider, fixed_env=fixed)


# ---------------------------------------------------------------------------
# serialization


def write_diagnostics_csv(path, diagnostics):
    cols = ["iteration", "total", "lds", "consistency", "reg", "t_used", "skipped"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in diagnostics:
            fh.write(",".join(repr(row[c]) if c != "iteration" and c != "skipped"
                              else str(row[c]) for c in cols) + "\n")


def save_checkpoint(path, pv: ParamVector):
    """Flat float32 little-endian values plus a JSON sidecar of segments."""
    np.asarray(pv.values, dtype="<f4").tofile(path)
    sidecar = {name: {"offset": off, "length": ln} for name, (off, ln) in pv.segments.items()}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_checkpoint(path):
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    values = np.fromfile(path, dtype="<f4").astype(np.float64)
    ordered = sorted(sidecar.items(), key=lambda kv: kv[1]["offset"])
    return ParamVector([(n, d["length"]) for n, d in ordered], values)
