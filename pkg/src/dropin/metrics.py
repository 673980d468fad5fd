"""Image metrics and the synthetic benchmark.

The benchmark mirrors the HDR-panorama protocol: render an LDR background
from a ground-truth environment map, render a reference insertion lit by the
same map, then recover lighting with the photometric oracle (the reference is
withheld from the optimizer except through the provider's crops) and report
RMSE / SSIM / si-RMSE of the final composite against the reference.
"""

import numpy as np
from dataclasses import dataclass, field

from .guidance import PhotometricOracle
from .imageio import read_pfm
from .lightfield import EnvironmentMap
from .optimizer import OptimConfig, run_optimization
from .tonemap import ToneParams, apply_fg_tone, apply_shadow_tone, reinhard
from .tracer import RenderSettings, composite, render_foreground, render_shadow_ratio, visibility_mask


def rmse(a, b):
    """Root mean squared error over all pixels and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def si_rmse(a, b):
    """Scale-invariant RMSE: min over scalar alpha of rmse(alpha * a, b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    denom = float((a * a).sum())
    alpha = float((a * b).sum()) / denom if denom > 0 else 0.0
    return rmse(alpha * a, b)


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter2_valid(img, w):
    """Separable 'valid' correlation with a 1-d window along both axes."""
    k = w.size
    n_rows = img.shape[0] - k + 1
    acc = w[0] * img[0:n_rows, :]
    for offset in range(1, k):
        acc = acc + w[offset] * img[offset : offset + n_rows, :]
    n_cols = img.shape[1] - k + 1
    acc2 = w[0] * acc[:, 0:n_cols]
    for offset in range(1, k):
        acc2 = acc2 + w[offset] * acc[:, offset : offset + n_cols]
    return acc2


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Gaussian-weighted SSIM, channel-averaged; images in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise ValueError("image smaller than the SSIM window")
    w = _gaussian_window(window_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for c in range(a.shape[2]):
        x = a[:, :, c]
        y = b[:, :, c]
        mx = _filter2_valid(x, w)
        my = _filter2_valid(y, w)
        mxx = _filter2_valid(x * x, w)
        myy = _filter2_valid(y * y, w)
        mxy = _filter2_valid(x * y, w)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


@dataclass
class MetricsReport:
    rmse: float
    ssim: float
    si_rmse: float
    per_image: list = field(default_factory=list)  # (name, rmse, ssim, si_rmse)

    def rows(self):
        return self.per_image or [("scene", self.rmse, self.ssim, self.si_rmse)]

    def to_csv(self):
        lines = ["name,rmse,ssim,si_rmse"]
        for name, r, s, sir in self.rows():
            lines.append(f"{name},{r!r},{s!r},{sir!r}")
        return "\n".join(lines) + "\n"

    def pretty(self):
        out = [f"{'scene':<24} {'rmse':>10} {'ssim':>10} {'si-rmse':>10}"]
        for name, r, s, sir in self.rows():
            out.append(f"{name:<24} {r:>10.5f} {s:>10.5f} {sir:>10.5f}")
        return "\n".join(out)


def render_background(env: EnvironmentMap, camera):
    """LDR perspective view of the panorama: Reinhard then the gamma encode
    happens at the caller; returns linear-tone values in [0, 1)."""
    rows, cols = camera.resolution
    half_w, half_h = camera.half_extents()
    jj, ii = np.meshgrid(np.arange(cols), np.arange(rows))
    x = (2.0 * (jj + 0.5) / cols - 1.0) * half_w
    y = (1.0 - 2.0 * (ii + 0.5) / rows) * half_h
    d = np.stack([x, y, -np.ones_like(x)], axis=-1) @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    H, W = env.height, env.width
    theta = np.arccos(np.clip(d[:, :, 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[:, :, 1], d[:, :, 0]), 2.0 * np.pi)
    fi = np.clip(theta * H / np.pi - 0.5, 0.0, H - 1.0)
    fj = phi * W / (2.0 * np.pi) - 0.5
    i0 = np.floor(fi).astype(np.int64)
    i1 = np.minimum(i0 + 1, H - 1)
    j0 = np.floor(fj).astype(np.int64) % W
    j1 = (j0 + 1) % W
    wi = (fi - np.floor(fi))[:, :, None]
    wj = (fj - np.floor(fj))[:, :, None]
    pix = env.pixels
    radiance = (
        pix[i0, j0] * (1 - wi) * (1 - wj)
        + pix[i1, j0] * wi * (1 - wj)
        + pix[i0, j1] * (1 - wi) * wj
        + pix[i1, j1] * wi * wj
    )
    return reinhard(radiance)


def render_reference(scene, env: EnvironmentMap, settings: RenderSettings, background_linear):
    """Insertion lit by the ground-truth map with identity tone curves."""
    tone = ToneParams()
    i_fg = render_foreground(scene, env, settings)
    beta = render_shadow_ratio(scene, env, settings)
    vis = visibility_mask(scene, settings)
    return composite(
        background_linear, apply_fg_tone(i_fg, tone), apply_shadow_tone(beta, tone), vis
    )


def synth_benchmark(hdr_env_path, scene, config: OptimConfig, name=None):
    """One benchmark scene: GT-lit reference vs photometric-oracle recovery."""
    pixels = read_pfm(hdr_env_path)
    if pixels.ndim != 3:
        raise ValueError("benchmark expects a color PFM environment map")
    env = EnvironmentMap(np.maximum(pixels, 0.0))
    resolution = config.render.resolution or scene.camera.resolution
    from dataclasses import replace as dc_replace

    cam = scene.camera
    if tuple(resolution) != tuple(cam.resolution):
        cam = dc_replace(cam, resolution=tuple(resolution))
    background = render_background(env, cam)

    settings = RenderSettings(
        spp=config.render.spp, mis_rays=config.render.mis_rays,
        max_depth=config.render.max_depth, resolution=resolution,
        base_seed=derive_ref_seed(config.seed),
    )
    reference = render_reference(scene, env, settings, background)
    provider = PhotometricOracle(reference, config.guidance.crop_resolution)
    result = run_optimization(scene, background, config, provider)
    final = result.composite_image
    label = name or str(hdr_env_path)
    report = MetricsReport(
        rmse=rmse(final, reference),
        ssim=ssim(np.clip(final, 0, 1), np.clip(reference, 0, 1)),
        si_rmse=si_rmse(final, reference),
    )
    report.per_image = [(label, report.rmse, report.ssim, report.si_rmse)]
    return report, result, reference


def derive_ref_seed(seed):
    # keep the reference render's sample set disjoint from optimization seeds
    return (int(seed) ^ 0x5EED5EED) & 0xFFFFFFFF
