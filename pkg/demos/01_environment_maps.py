"""Spherical-Gaussian environment maps: build lobes, bake, sample, save.

Walks through the lighting representation: a handful of SG lobes baked to an
equirectangular radiance map, luminance-weighted importance sampling, and the
PFM/PNG outputs.
"""

import numpy as np

from dropin.lightfield import (
    SgLightingParams,
    build_sampling_tables,
    envmap_bake,
    envmap_sample,
    normalized_luminance,
)
from dropin.imageio import write_pfm, write_png
from dropin.tonemap import reinhard, srgb_encode

# a warm sun-like peak plus a cool ambient lobe and a ground bounce
lighting = SgLightingParams(
    log_color=np.log([[6.0, 5.0, 3.5], [0.4, 0.5, 0.8], [0.3, 0.25, 0.2]]),
    axis_raw=[[0.4, -0.3, 1.0], [-0.2, 0.1, 1.0], [0.0, 0.0, -1.0]],
    log_sharpness=np.log([0.15, 1.2, 0.9]),
)

env = envmap_bake(lighting, 128, 256)
print(f"baked {env.height}x{env.width} map; mean luminance {env.luminance().mean():.3f}")
print(f"solid angles sum to {env.delta_omega.sum():.6f} (4*pi = {4*np.pi:.6f})")

tables = build_sampling_tables(env)
dirs = np.array([envmap_sample(env, u1, u2, tables)[0] for u1, u2 in np.random.default_rng(0).random((2000, 2))])
up = (dirs[:, 2] > 0).mean()
print(f"2000 importance samples: {100*up:.1f}% in the upper hemisphere (sun side)")

nl = normalized_luminance(env)
print(f"normalized luminance integrates to {(nl * env.delta_omega).sum():.6f}")

write_pfm("out_envmap.pfm", env.pixels)
write_png("out_envmap_preview.png", srgb_encode(reinhard(env.pixels)))
print("wrote out_envmap.pfm and out_envmap_preview.png")
