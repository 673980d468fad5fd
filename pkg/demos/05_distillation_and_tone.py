"""Score-distillation gradient assembly with stub denoisers, plus the learned
tone-curve machinery: Reinhard base, monotone rational-quadratic residuals.
"""

import numpy as np

from dropin.guidance import (
    GuidanceConfig,
    NoiseSchedule,
    lds_grad_image,
    sds_grad_image,
    strength_schedule,
    stub_eps_cond,
    stub_eps_uncond,
    stub_noise,
)
from dropin.tonemap import RqSpline, reinhard

schedule = NoiseSchedule()
print(f"schedule: T={schedule.total_steps}, alpha_0={schedule.alpha[0]:.5f}, "
      f"alpha_T={schedule.alpha[-1]:.5f}, hash {schedule.hash()[:12]}...")

cfg = GuidanceConfig()
for it in (0, 300, 600):
    print(f"  max guidance strength at iteration {it}: {strength_schedule(it, 600, cfg):.2f}")

rng = np.random.default_rng(3)
crop = rng.random((64, 64, 3))
noise = stub_noise(42, crop.shape)
t = schedule.index_for_fraction(0.45)
g_lds = lds_grad_image(crop, stub_eps_cond, stub_eps_uncond, t, noise, cfg, schedule)
g_sds = sds_grad_image(crop, stub_eps_cond, stub_eps_uncond, t, noise,
                       GuidanceConfig(cfg_scale=7.5), schedule)
print(f"lds gradient: mean |g| = {np.abs(g_lds).mean():.4f} (no noise term, no cfg scale)")
print(f"sds gradient: mean |g| = {np.abs(g_sds).mean():.4f} (cfg 7.5, noise subtracted)")

# a tone curve that lifts shadows and compresses highlights
raw = RqSpline.identity_raw()
raw[5:10] += np.array([0.8, 0.3, 0.0, -0.3, -0.8])  # reshape bin heights
spline = RqSpline(raw)
xs = np.array([0.1, 0.25, 0.5, 0.75, 0.9])
print("tone residual on top of Reinhard:")
for x in xs:
    print(f"  linear {x:4.2f} -> reinhard {reinhard(x):.3f} -> curved {spline.evaluate(reinhard(np.array(x))):.3f}")
print(f"endpoints stay pinned: f(0)={spline.evaluate(np.array(0.0)):.1f}, f(1)={spline.evaluate(np.array(1.0)):.1f}")
