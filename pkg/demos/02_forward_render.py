"""Forward rendering: foreground radiance, shadow ratio, visibility,
and the final composite for a sphere dropped onto the shadow catcher.
"""

import numpy as np

from dropin.imageio import write_pfm, write_png
from dropin.lightfield import SgLightingParams, envmap_bake
from dropin.metrics import render_background
from dropin.shapes import make_toy_scene
from dropin.tonemap import ToneParams, apply_fg_tone, apply_shadow_tone, srgb_encode
from dropin.tracer import RenderSettings, composite, render_foreground, render_shadow_ratio, visibility_mask

scene = make_toy_scene(resolution=(192, 288), sphere=True)
lighting = SgLightingParams(
    np.log([[5.0, 4.2, 3.0], [0.35, 0.45, 0.7]]),
    [[0.5, -0.6, 1.0], [0.0, 0.0, 1.0]],
    np.log([0.18, 1.1]),
)
env = envmap_bake(lighting, 128, 256)
settings = RenderSettings(spp=64, mis_rays=4, max_depth=3, base_seed=7)

i_fg = render_foreground(scene, env, settings)
diag = {}
beta = render_shadow_ratio(scene, env, settings, diagnostics=diag)
vis = visibility_mask(scene, settings)
print(f"foreground mean radiance {i_fg[vis > 0].mean():.3f}")
print(f"beta range [{beta.min():.3f}, {beta.max():.3f}]; guards {diag['beta_denominator_guards']}")
print(f"object covers {100 * vis.mean():.1f}% of the frame")

tone = ToneParams()  # identity splines on top of Reinhard
bg = render_background(env, scene.camera)
comp = composite(bg, apply_fg_tone(i_fg, tone), apply_shadow_tone(beta, tone), vis)

write_pfm("out_foreground.pfm", i_fg)
write_pfm("out_beta.pfm", beta)
write_png("out_composite.png", srgb_encode(comp))
print("wrote out_foreground.pfm, out_beta.pfm, out_composite.png")
