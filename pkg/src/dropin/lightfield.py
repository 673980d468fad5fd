"""Spherical-Gaussian lighting: lobes, baked environment maps, importance
sampling, luminance statistics, map fusion, and the two lighting regularizers.

All operations are pure functions; every differentiable op has a matching
hand-derived *_vjp companion used by the adjoint pass.
"""

import numpy as np
from dataclasses import dataclass
from numba import njit

from .errors import DegenerateDistributionError

SIGMA_MIN = 1e-3
SIGMA_MAX = 2.0
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])  # Rec.709
LOG_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class SgLobe:
    """One spherical Gaussian: radiance c * exp(-(1 - v.mu) / sigma^2).

    Stored unconstrained: color and sharpness in log space, axis normalized
    on read. sigma is clamped to [SIGMA_MIN, SIGMA_MAX] on evaluation.
    """

    log_color: np.ndarray
    axis_raw: np.ndarray
    log_sharpness: float

    def __post_init__(self):
        lc = np.asarray(self.log_color, dtype=np.float64).reshape(3)
        ar = np.asarray(self.axis_raw, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lc)) and np.all(np.isfinite(ar)) and np.isfinite(self.log_sharpness)):
            raise ValueError("lobe parameters must be finite")
        if np.linalg.norm(ar) < 1e-12:
            raise ValueError("axis_raw must be nonzero")
        object.__setattr__(self, "log_color", lc)
        object.__setattr__(self, "axis_raw", ar)

    @property
    def color(self):
        return np.exp(self.log_color)

    @property
    def axis(self):
        return self.axis_raw / np.linalg.norm(self.axis_raw)

    @property
    def sharpness(self):
        return float(np.clip(np.exp(self.log_sharpness), SIGMA_MIN, SIGMA_MAX))


class SgLightingParams:
    """A set of N optimizable SG lobes, stored as packed arrays.

    Flat layout per lobe: [log_color(3), axis_raw(3), log_sharpness].
    """

    def __init__(self, log_color, axis_raw, log_sharpness):
        self.log_color = np.asarray(log_color, dtype=np.float64).reshape(-1, 3)
        self.axis_raw = np.asarray(axis_raw, dtype=np.float64).reshape(-1, 3)
        self.log_sharpness = np.asarray(log_sharpness, dtype=np.float64).reshape(-1)
        n = self.log_color.shape[0]
        if n < 1:
            raise ValueError("need at least one lobe")
        if self.axis_raw.shape[0] != n or self.log_sharpness.shape[0] != n:
            raise ValueError("lobe arrays disagree on N")
        for a in (self.log_color, self.axis_raw, self.log_sharpness):
            if not np.all(np.isfinite(a)):
                raise ValueError("lobe parameters must be finite")
        if np.any(np.linalg.norm(self.axis_raw, axis=1) < 1e-12):
            raise ValueError("axis_raw must be nonzero")

    @property
    def n_lobes(self):
        return self.log_color.shape[0]

    @property
    def lobes(self):
        return [
            SgLobe(self.log_color[k], self.axis_raw[k], float(self.log_sharpness[k]))
            for k in range(self.n_lobes)
        ]

    @classmethod
    def from_lobes(cls, lobes):
        return cls(
            np.stack([l.log_color for l in lobes]),
            np.stack([l.axis_raw for l in lobes]),
            np.array([l.log_sharpness for l in lobes]),
        )

    def to_flat(self):
        return np.concatenate(
            [self.log_color, self.axis_raw, self.log_sharpness[:, None]], axis=1
        ).ravel()

    @classmethod
    def from_flat(cls, flat):
        a = np.asarray(flat, dtype=np.float64).reshape(-1, 7)
        return cls(a[:, 0:3], a[:, 3:6], a[:, 6])

    def read(self):
        """Constrained values (c, mu, sigma) plus the sigma clamp gate."""
        c = np.exp(self.log_color)
        norms = np.linalg.norm(self.axis_raw, axis=1, keepdims=True)
        mu = self.axis_raw / norms
        sigma_raw = np.exp(self.log_sharpness)
        sigma = np.clip(sigma_raw, SIGMA_MIN, SIGMA_MAX)
        gate = ((sigma_raw > SIGMA_MIN) & (sigma_raw < SIGMA_MAX)).astype(np.float64)
        return c, mu, sigma, gate


class EnvironmentMap:
    """Equirectangular radiance map with a cached solid-angle grid.

    theta runs from the +z pole (row 0) to -z; phi = 2*pi*(j+0.5)/W.
    """

    def __init__(self, pixels):
        pixels = np.ascontiguousarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError("pixels must be HxWx3")
        if pixels.shape[0] < 2 or pixels.shape[1] < 2:
            raise ValueError("map must be at least 2x2")
        if not np.all(np.isfinite(pixels)) or np.any(pixels < 0):
            raise ValueError("radiance must be finite and nonnegative")
        self.pixels = pixels
        self.height, self.width = pixels.shape[:2]
        self.delta_omega = solid_angle_grid(self.height, self.width)

    @property
    def shape(self):
        return self.pixels.shape

    def luminance(self):
        return self.pixels @ LUMA_WEIGHTS


# ---------------------------------------------------------------------------
# parameterization of the sphere


def solid_angle_grid(H, W):
    """Per-pixel solid angles; sums to 4*pi exactly (cos-difference rows)."""
    edges = np.cos(np.pi * np.arange(H + 1) / H)
    rows = (edges[:-1] - edges[1:]) * (2.0 * np.pi / W)
    return np.repeat(rows[:, None], W, axis=1)


def direction_from_pixel(i, j, H, W):
    """Unit direction at the center of pixel (i, j)."""
    i = np.asarray(i)
    j = np.asarray(j)
    if np.any(i < 0) or np.any(i >= H) or np.any(j < 0) or np.any(j >= W):
        raise ValueError("pixel index out of range")
    theta = np.pi * (i + 0.5) / H
    phi = 2.0 * np.pi * (j + 0.5) / W
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def direction_grid(H, W):
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return direction_from_pixel(ii, jj, H, W)


@njit(cache=True, inline="always")
def _dir_to_pixel(dx, dy, dz, H, W):
    z = min(max(dz, -1.0), 1.0)
    theta = np.arccos(z)
    i = int(theta * H / np.pi)
    if i >= H:
        i = H - 1
    phi = np.arctan2(dy, dx)
    if phi < 0.0:
        phi += 2.0 * np.pi
    j = int(phi * W / (2.0 * np.pi))
    if j >= W:
        j = W - 1
    return i, j


def pixel_from_direction(v, H, W):
    v = np.asarray(v, dtype=np.float64)
    return _dir_to_pixel(v[0], v[1], v[2], H, W)


# ---------------------------------------------------------------------------
# single-lobe evaluation


def _check_unit(v):
    v = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError("direction must be finite")
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError("direction must be unit length")
    return v


def sg_eval(lobe: SgLobe, v):
    """Radiance of one lobe along unit direction v."""
    v = _check_unit(v)
    c = lobe.color
    mu = lobe.axis
    sigma = lobe.sharpness
    return c * np.exp(-(1.0 - v @ mu) / sigma**2)


def sg_eval_vjp(lobe: SgLobe, v, upstream):
    """d<upstream, sg_eval>/d(log_color, axis_raw, log_sharpness) as a (7,) vector."""
    v = _check_unit(v)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(3)
    c = lobe.color
    a = lobe.axis_raw
    na = np.linalg.norm(a)
    mu = a / na
    sigma_raw = np.exp(lobe.log_sharpness)
    sigma = np.clip(sigma_raw, SIGMA_MIN, SIGMA_MAX)
    gate = float(SIGMA_MIN < sigma_raw < SIGMA_MAX)

    e = np.exp(-(1.0 - v @ mu) / sigma**2)
    g = np.asarray(upstream)
    d_log_color = g * c * e  # dG_c/dlog_c_c = G_c
    p = float(g @ (c * e))  # sum_c g_c c_c e
    d_mu = p * v / sigma**2
    d_axis = (d_mu - mu * (d_mu @ mu)) / na
    d_log_sharp = p * 2.0 * (1.0 - v @ mu) / sigma**2 * gate
    return np.concatenate([d_log_color, d_axis, [d_log_sharp]])


# ---------------------------------------------------------------------------
# baking


def envmap_bake(params: SgLightingParams, H=128, W=256):
    """Sum all lobes over the pixel-center direction grid."""
    if H < 2 or W < 2:
        raise ValueError("map must be at least 2x2")
    dirs = direction_grid(H, W)
    c, mu, sigma, _ = params.read()
    pix = np.zeros((H, W, 3))
    for k in range(params.n_lobes):
        dot = dirs @ mu[k]
        e = np.exp(-(1.0 - dot) / sigma[k] ** 2)
        pix += e[:, :, None] * c[k]
    return EnvironmentMap(pix)


def envmap_bake_vjp(params: SgLightingParams, H, W, grad_pixels):
    """Pull an HxWx3 pixel gradient back to the packed (N, 7) lobe layout."""
    dirs = direction_grid(H, W)
    g = np.asarray(grad_pixels, dtype=np.float64).reshape(H, W, 3)
    c, mu, sigma, gate = params.read()
    norms = np.linalg.norm(params.axis_raw, axis=1)
    out = np.zeros((params.n_lobes, 7))
    for k in range(params.n_lobes):
        dot = dirs @ mu[k]
        e = np.exp(-(1.0 - dot) / sigma[k] ** 2)
        out[k, 0:3] = c[k] * np.einsum("ijc,ij->c", g, e)
        p = (g @ c[k]) * e  # (H, W)
        d_mu = np.einsum("ij,ijd->d", p, dirs) / sigma[k] ** 2
        out[k, 3:6] = (d_mu - mu[k] * (d_mu @ mu[k])) / norms[k]
        out[k, 6] = gate[k] * 2.0 / sigma[k] ** 2 * np.sum(p * (1.0 - dot))
    return out


# ---------------------------------------------------------------------------
# importance sampling (emitter side of MIS); the distribution is detached


def build_sampling_tables(env: EnvironmentMap):
    """Flat luminance CDF plus the per-steradian pdf grid."""
    w = env.luminance() * env.delta_omega
    total = w.sum()
    if total <= 0.0:
        raise DegenerateDistributionError("environment map has zero luminance")
    cdf = np.cumsum(w.ravel())
    cdf /= cdf[-1]
    pdf = env.luminance() / total
    return np.ascontiguousarray(cdf), np.ascontiguousarray(pdf)


@njit(cache=True, inline="always")
def _sample_env_dir(cdf, H, W, u1, u2):
    """Pick a pixel by luminance CDF, then a direction uniformly inside it."""
    idx = np.searchsorted(cdf, u1, side="right")
    if idx >= cdf.shape[0]:
        idx = cdf.shape[0] - 1
    lo = cdf[idx - 1] if idx > 0 else 0.0
    span = cdf[idx] - lo
    ua = (u1 - lo) / span if span > 0.0 else 0.5
    if ua >= 1.0:
        ua = np.nextafter(1.0, 0.0)
    i = idx // W
    j = idx - i * W
    cos_lo = np.cos(np.pi * i / H)
    cos_hi = np.cos(np.pi * (i + 1) / H)
    cz = cos_lo + u2 * (cos_hi - cos_lo)
    st = np.sqrt(max(0.0, 1.0 - cz * cz))
    phi = 2.0 * np.pi * (j + ua) / W
    return st * np.cos(phi), st * np.sin(phi), cz, i, j


def envmap_sample(env: EnvironmentMap, u1, u2, tables=None):
    """(direction, pdf per steradian); density proportional to luminance."""
    cdf, pdf = tables if tables is not None else build_sampling_tables(env)
    dx, dy, dz, i, j = _sample_env_dir(cdf, env.height, env.width, float(u1), float(u2))
    return np.array([dx, dy, dz]), float(pdf[i, j])


def envmap_pdf(env: EnvironmentMap, direction, tables=None):
    _, pdf = tables if tables is not None else build_sampling_tables(env)
    v = _check_unit(direction)
    i, j = pixel_from_direction(v, env.height, env.width)
    return float(pdf[i, j])


# ---------------------------------------------------------------------------
# luminance statistics and regularizers


def normalized_luminance(env: EnvironmentMap):
    """Luminance grid normalized so that sum(l * dOmega) == 1."""
    lum = env.luminance()
    z = float((lum * env.delta_omega).sum())
    if z <= 0.0:
        raise DegenerateDistributionError("environment map has zero luminance")
    return lum / z


def _normalized_luminance_vjp(env: EnvironmentMap, grad_norm_lum):
    """Chain d/d(normalized luminance) back to d/d(pixels)."""
    lum = env.luminance()
    dO = env.delta_omega
    z = float((lum * dO).sum())
    g = np.asarray(grad_norm_lum, dtype=np.float64)
    inner = float((g * lum).sum()) / z
    d_lum = (g - inner * dO) / z
    return d_lum[:, :, None] * LUMA_WEIGHTS


def consistency_loss(env_fg: EnvironmentMap, env_shadow: EnvironmentMap):
    """Cross entropy -sum(l_shadow * log(l_fg) * dOmega); shadow side detached."""
    if env_fg.shape != env_shadow.shape:
        raise ValueError("maps must share dimensions")
    lf = normalized_luminance(env_fg)
    ls = normalized_luminance(env_shadow)
    return float(-(ls * np.log(np.maximum(lf, LOG_FLOOR)) * env_fg.delta_omega).sum())


def consistency_loss_grad(env_fg: EnvironmentMap, env_shadow: EnvironmentMap):
    """Gradient w.r.t. env_fg pixels only; env_shadow is treated as constant."""
    if env_fg.shape != env_shadow.shape:
        raise ValueError("maps must share dimensions")
    lf = normalized_luminance(env_fg)
    ls = normalized_luminance(env_shadow)
    safe = np.maximum(lf, LOG_FLOOR)
    d_lf = -(ls / safe) * (lf > LOG_FLOOR) * env_fg.delta_omega
    return _normalized_luminance_vjp(env_fg, d_lf)


def cauchy_reg(env_shadow: EnvironmentMap):
    """Log-space Cauchy penalty sum(log(1 + 2 L^2) * dOmega) over channels."""
    L = env_shadow.pixels
    return float((np.log1p(2.0 * L**2) * env_shadow.delta_omega[:, :, None]).sum())


def cauchy_reg_grad(env_shadow: EnvironmentMap):
    L = env_shadow.pixels
    return 4.0 * L / (1.0 + 2.0 * L**2) * env_shadow.delta_omega[:, :, None]


# ---------------------------------------------------------------------------
# two-map fusion (unnormalized luminances; chroma follows the foreground map)


def _fuse_parts(env_fg, env_shadow):
    yf = env_fg.luminance()
    ys = env_shadow.luminance()
    yf_safe = np.maximum(yf, LOG_FLOOR)
    m = float(yf.max())
    m_safe = max(m, LOG_FLOOR)
    d = np.maximum(yf + ys, LOG_FLOOR)
    r = (yf / m_safe) * (ys / d)
    y_fused = (1.0 - r) * yf + r * ys
    t = y_fused / yf_safe
    return yf, ys, yf_safe, m_safe, d, r, y_fused, t


def fuse(env_fg: EnvironmentMap, env_shadow: EnvironmentMap):
    """Blend luminances toward the shadow map at bright foreground pixels."""
    if env_fg.shape != env_shadow.shape:
        raise ValueError("maps must share dimensions")
    *_, t = _fuse_parts(env_fg, env_shadow)
    return EnvironmentMap(env_fg.pixels * t[:, :, None])


def fuse_vjp(env_fg: EnvironmentMap, env_shadow: EnvironmentMap, grad_out):
    """Pixel gradients (d_fg, d_shadow) for an upstream HxWx3 gradient."""
    g = np.asarray(grad_out, dtype=np.float64)
    yf, ys, yf_safe, m, d, r, y_fused, t = _fuse_parts(env_fg, env_shadow)
    F = env_fg.pixels

    d_fg = g * t[:, :, None]  # direct F factor
    q = np.einsum("ijc,ijc->ij", g, F)  # d/dt
    d_yfused = q / yf_safe
    d_r = d_yfused * (ys - yf)
    # pointwise parts of r (max(yf) held, then its argmax term added below)
    d_yf = d_yfused * (1.0 - r) + d_r * (ys**2 / (m * d**2)) - q * y_fused / yf_safe**2 * (yf > LOG_FLOOR)
    d_ys = d_yfused * r + d_r * (yf**2 / (m * d**2))
    gm = float((d_r * (-r / m)).sum())
    am = np.unravel_index(np.argmax(yf), yf.shape)
    d_yf[am] += gm
    d_fg += d_yf[:, :, None] * LUMA_WEIGHTS
    d_sh = d_ys[:, :, None] * LUMA_WEIGHTS
    return d_fg, d_sh


def blend_scheduled(env_fg: EnvironmentMap, env_shadow: EnvironmentMap, s):
    """Move both maps toward the fused map; s=0 identity, s=1 both fused."""
    if not 0.0 <= s <= 1.0:
        raise ValueError("blend factor must be in [0, 1]")
    fused = fuse(env_fg, env_shadow)
    out_fg = EnvironmentMap(s * fused.pixels + (1.0 - s) * env_fg.pixels)
    out_sh = EnvironmentMap(s * fused.pixels + (1.0 - s) * env_shadow.pixels)
    return out_fg, out_sh


def blend_scheduled_vjp(env_fg, env_shadow, s, grad_fg_out, grad_sh_out):
    g_fused = s * (np.asarray(grad_fg_out) + np.asarray(grad_sh_out))
    d_fg, d_sh = fuse_vjp(env_fg, env_shadow, g_fused)
    d_fg = d_fg + (1.0 - s) * np.asarray(grad_fg_out)
    d_sh = d_sh + (1.0 - s) * np.asarray(grad_sh_out)
    return d_fg, d_sh


# ---------------------------------------------------------------------------
# initialization


def fibonacci_sphere(n):
    """n roughly uniform unit vectors (golden-angle spiral)."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (1.0 + np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def init_lighting(n_lobes=64, target_mean_luminance=0.5, sigma=0.7, H=64, W=128):
    """Fibonacci-sphere axes; uniform gray color calibrated so the baked map's
    mean luminance matches the target; paper-silent defaults."""
    axes = fibonacci_sphere(n_lobes)
    probe = SgLightingParams(
        np.zeros((n_lobes, 3)), axes, np.full(n_lobes, np.log(sigma))
    )
    m = float(envmap_bake(probe, H, W).luminance().mean())
    c = max(target_mean_luminance, 1e-4) / max(m, 1e-12)
    return SgLightingParams(
        np.full((n_lobes, 3), np.log(c)), axes, np.full(n_lobes, np.log(sigma))
    )
