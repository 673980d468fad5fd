"""Guidance providers and the score-distillation gradient assembly.

The optimization loop only ever sees the GuidanceProvider interface: it
submits a crop of the composited image and receives d(loss)/d(pixels) at the
crop resolution. Providers included here:

- PhotometricOracle: mean-L1 against a withheld reference (verification).
- StubDistillationProvider: the distillation gradients of this module driven
  by deterministic affine denoisers (no neural network).
- RemoteProvider: HTTP client for an external guidance service.

Distillation math is pure gradient assembly over pluggable denoiser
callables. With classifier-free guidance at scale s:

    sds:  w(t) * alpha_t * ((1+s) eps_c(z_t, t) - s eps_u(z_t, t) - noise)
    lds:  w(t) * alpha_t * (eps_adapted(z_t, t) - eps_base(z_t, t))

where z_t = alpha_t z + sigma_t noise and the alpha_t factor folds in
d z_t / d z.

Wire protocol (bit-exact): POST /guidance, body = 16-byte header
{magic "DPG1", u32 height, u32 width, u32 channels, little-endian} followed
by h*w*c float32 little-endian pixels (linear RGB in [0, 1]); request headers
x-prompt (UTF-8), x-timestep (decimal fraction), x-seed (u64 decimal).
Response: same binary layout for the gradient, plus optional x-loss header.
GET /health -> 200 "ok"; the client sends x-schedule-hash and treats a
mismatch as fatal.
"""

import hashlib
import struct
import numpy as np
from dataclasses import dataclass, field

from .errors import GuidanceUnavailableError
from .rng import rng_stream, rng_normal, CROP, TIMESTEP, NOISE

MAGIC = b"DPG1"


# ---------------------------------------------------------------------------
# noise schedule


class NoiseSchedule:
    """Variance-preserving schedule from a scaled-linear beta ramp."""

    def __init__(self, total_steps=1000, beta_start=0.00085, beta_end=0.012):
        self.total_steps = int(total_steps)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        t = np.arange(self.total_steps)
        betas = (
            np.sqrt(beta_start)
            + t / (self.total_steps - 1) * (np.sqrt(beta_end) - np.sqrt(beta_start))
        ) ** 2
        alpha_bar = np.cumprod(1.0 - betas)
        self.alpha = np.sqrt(alpha_bar)
        self.sigma = np.sqrt(1.0 - alpha_bar)

    def index_for_fraction(self, frac):
        return int(round(float(frac) * (self.total_steps - 1)))

    def hash(self):
        canon = f"scaled_linear:{self.total_steps}:{self.beta_start!r}:{self.beta_end!r}"
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class GuidanceConfig:
    cfg_scale: float = 7.5           # only used by the sds variant
    weight: object = None            # w(t); None -> constant 1
    strength_max_start: float = 0.6
    strength_max_end: float = 0.3
    strength_min: float = 0.02
    crop_multiple: tuple = (1.2, 2.5)
    crop_resolution: int = 512

    def __post_init__(self):
        if not (0.0 < self.strength_min <= 1.0 and 0.0 < self.strength_max_end <= 1.0
                and 0.0 < self.strength_max_start <= 1.0):
            raise ValueError("strength values must lie in (0, 1]")
        if self.crop_multiple[0] < 1.0 or self.crop_multiple[1] < self.crop_multiple[0]:
            raise ValueError("crop multiples must be >= 1 and ordered")

    def w(self, t_index):
        return 1.0 if self.weight is None else float(self.weight(t_index))


@dataclass
class GuidanceResult:
    gradient: np.ndarray
    loss: float | None
    rect: tuple  # (i0, i1, j0, j1), half-open


# ---------------------------------------------------------------------------
# distillation gradients


def _diffuse(z, t_index, noise, schedule):
    a = schedule.alpha[t_index]
    s = schedule.sigma[t_index]
    return a * np.asarray(z, dtype=np.float64) + s * np.asarray(noise, dtype=np.float64), a


def sds_grad_image(z, eps_cond, eps_uncond, t_index, noise, config: GuidanceConfig,
                   schedule: NoiseSchedule):
    """Classifier-free-guided score-distillation gradient in z space."""
    z = np.asarray(z, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z.shape:
        raise ValueError("noise must match the input shape")
    z_t, alpha = _diffuse(z, t_index, noise, schedule)
    s = config.cfg_scale
    e_c = np.asarray(eps_cond(z_t, t_index), dtype=np.float64)
    if e_c.shape != z.shape:
        raise ValueError("denoiser output shape mismatch")
    if s != 0.0:
        e_u = np.asarray(eps_uncond(z_t, t_index), dtype=np.float64)
        if e_u.shape != z.shape:
            raise ValueError("denoiser output shape mismatch")
        e_hat = (1.0 + s) * e_c - s * e_u
    else:
        e_hat = e_c
    return config.w(t_index) * alpha * (e_hat - noise)


def lds_grad_image(z, eps_adapted_cond, eps_base_uncond, t_index, noise,
                   config: GuidanceConfig, schedule: NoiseSchedule):
    """Adapted-minus-base distillation gradient: no noise term, no cfg scale."""
    z = np.asarray(z, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z.shape:
        raise ValueError("noise must match the input shape")
    z_t, alpha = _diffuse(z, t_index, noise, schedule)
    e_a = np.asarray(eps_adapted_cond(z_t, t_index), dtype=np.float64)
    e_b = np.asarray(eps_base_uncond(z_t, t_index), dtype=np.float64)
    if e_a.shape != z.shape or e_b.shape != z.shape:
        raise ValueError("denoiser output shape mismatch")
    return config.w(t_index) * alpha * (e_a - e_b)


def strength_schedule(iteration, total_iterations, config: GuidanceConfig):
    """Linearly decayed maximum guidance strength (t_max fraction)."""
    if not 0 <= iteration <= total_iterations:
        raise ValueError("iteration out of range")
    f = iteration / total_iterations if total_iterations > 0 else 0.0
    return config.strength_max_start + f * (config.strength_max_end - config.strength_max_start)


def draw_timestep(iteration, total_iterations, seed, config: GuidanceConfig):
    """Per-step t fraction, uniform in [strength_min, t_max(iteration)]."""
    t_max = strength_schedule(iteration, total_iterations, config)
    u = rng_stream(seed, iteration, 0, 0, TIMESTEP, 1)[0]
    return config.strength_min + u * (t_max - config.strength_min)


# ---------------------------------------------------------------------------
# crop sampling


def sample_crop(v_mask, iteration, seed, config: GuidanceConfig):
    """Square crop containing the object bbox, side a random multiple of the
    bbox size, shifted/clamped to image bounds. Returns (i0, i1, j0, j1)."""
    v = np.asarray(v_mask)
    rows, cols = v.shape
    ii, jj = np.nonzero(v > 0)
    if ii.size == 0:
        raise GuidanceUnavailableError("object not visible; cannot place a crop")
    imin, imax = int(ii.min()), int(ii.max())
    jmin, jmax = int(jj.min()), int(jj.max())
    bh = imax - imin + 1
    bw = jmax - jmin + 1
    u = rng_stream(seed, iteration, 0, 0, CROP, 3)
    lo, hi = config.crop_multiple
    side = int(round((lo + u[0] * (hi - lo)) * max(bh, bw)))
    ch = min(max(side, bh), rows)
    cw = min(max(side, bw), cols)
    i0_lo, i0_hi = max(0, imax + 1 - ch), min(imin, rows - ch)
    j0_lo, j0_hi = max(0, jmax + 1 - cw), min(jmin, cols - cw)
    i0 = i0_lo + int(u[1] * (i0_hi - i0_lo + 1)) if i0_hi > i0_lo else i0_lo
    j0 = j0_lo + int(u[2] * (j0_hi - j0_lo + 1)) if j0_hi > j0_lo else j0_lo
    return (i0, i0 + ch, j0, j0 + cw)


_RESIZE_CACHE = {}


def _resize_matrix(n_in, n_out):
    """Bilinear interpolation matrix with half-pixel centers and edge clamp."""
    key = (n_in, n_out)
    mat = _RESIZE_CACHE.get(key)
    if mat is None:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
        hi = np.clip(lo + 1, 0, n_in - 1)
        frac = np.clip(src - lo, 0.0, 1.0)
        mat = np.zeros((n_out, n_in))
        mat[np.arange(n_out), lo] += 1.0 - frac
        mat[np.arange(n_out), hi] += frac
        _RESIZE_CACHE[key] = mat
    return mat


def bilinear_resize(img, out_h, out_w):
    a = _resize_matrix(img.shape[0], out_h)
    b = _resize_matrix(img.shape[1], out_w)
    return np.einsum("oi,ijc,pj->opc", a, np.asarray(img, dtype=np.float64), b, optimize=True)


def bilinear_resize_vjp(in_shape, out_grad):
    a = _resize_matrix(in_shape[0], out_grad.shape[0])
    b = _resize_matrix(in_shape[1], out_grad.shape[1])
    return np.einsum("oi,opc,pj->ijc", a, np.asarray(out_grad, dtype=np.float64), b, optimize=True)


def extract_crop(img, rect, resolution):
    i0, i1, j0, j1 = rect
    return bilinear_resize(img[i0:i1, j0:j1], resolution, resolution)


def embed_crop_grad(img_shape, rect, grad_crop):
    """VJP of extract_crop: resize-transpose into the rect, zeros elsewhere."""
    i0, i1, j0, j1 = rect
    out = np.zeros(img_shape)
    out[i0:i1, j0:j1] = bilinear_resize_vjp((i1 - i0, j1 - j0), grad_crop)
    return out


# ---------------------------------------------------------------------------
# providers


class GuidanceProvider:
    """Interface: gradient of a scalar realism objective w.r.t. crop pixels."""

    name = "base"

    def gradient(self, crop, rect, iteration, t_frac, seed) -> GuidanceResult:
        raise NotImplementedError


class PhotometricOracle(GuidanceProvider):
    """Mean-L1 against a withheld reference image (same full resolution)."""

    name = "oracle"

    def __init__(self, reference, crop_resolution=512):
        self.reference = np.asarray(reference, dtype=np.float64)
        self.crop_resolution = crop_resolution

    def gradient(self, crop, rect, iteration, t_frac, seed):
        ref_crop = extract_crop(self.reference, rect, crop.shape[0])
        diff = np.asarray(crop, dtype=np.float64) - ref_crop
        grad = np.sign(diff) / diff.size
        return GuidanceResult(gradient=grad, loss=float(np.mean(np.abs(diff))), rect=rect)


# affine stub denoisers: eps(z) = scale * z + bias, shared with the service's
# stub-model mode so wire round trips can be checked bit-exactly
STUB_COND_SCALE = 0.35
STUB_COND_BIAS = 0.05
STUB_UNCOND_SCALE = 0.30
STUB_UNCOND_BIAS = -0.02


def stub_eps_cond(z_t, t_index):
    return STUB_COND_SCALE * z_t + STUB_COND_BIAS


def stub_eps_uncond(z_t, t_index):
    return STUB_UNCOND_SCALE * z_t + STUB_UNCOND_BIAS


def stub_noise(seed, shape):
    n = int(np.prod(shape))
    return rng_normal(seed, 0, 0, 0, NOISE, n).reshape(shape)


class StubDistillationProvider(GuidanceProvider):
    """Distillation gradients driven by the affine stub denoisers."""

    name = "stub"

    def __init__(self, schedule=None, config=None, mode="lds"):
        if mode not in ("lds", "sds"):
            raise ValueError("mode must be lds or sds")
        self.schedule = schedule or NoiseSchedule()
        self.config = config or GuidanceConfig()
        self.mode = mode

    def gradient(self, crop, rect, iteration, t_frac, seed):
        t_index = self.schedule.index_for_fraction(t_frac)
        noise = stub_noise(seed, crop.shape)
        if self.mode == "lds":
            g = lds_grad_image(crop, stub_eps_cond, stub_eps_uncond, t_index, noise,
                               self.config, self.schedule)
        else:
            g = sds_grad_image(crop, stub_eps_cond, stub_eps_uncond, t_index, noise,
                               self.config, self.schedule)
        # distillation defines a gradient, not a scalar loss
        return GuidanceResult(gradient=g, loss=None, rect=rect)


# ---------------------------------------------------------------------------
# wire protocol


def pack_image(arr):
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim != 3:
        raise ValueError("wire images must be HxWxC")
    h, w, c = a.shape
    return MAGIC + struct.pack("<III", h, w, c) + a.tobytes()


def unpack_image(data):
    if len(data) < 16 or data[:4] != MAGIC:
        raise ValueError("bad wire magic")
    h, w, c = struct.unpack("<III", data[4:16])
    expected = 16 + h * w * c * 4
    if len(data) != expected:
        raise ValueError(f"wire payload length mismatch: {len(data)} != {expected}")
    return np.frombuffer(data[16:], dtype="<f4").reshape(h, w, c).astype(np.float64)


class RemoteProvider(GuidanceProvider):
    """HTTP client for the external guidance service."""

    name = "remote"

    def __init__(self, endpoint, prompt, timeout=30.0, schedule=None, session=None):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.prompt = prompt
        self.timeout = timeout
        self.schedule = schedule or NoiseSchedule()
        self._http = session or requests.Session()
        self._requests = requests
        self.health_check()

    def health_check(self):
        try:
            r = self._http.get(
                f"{self.endpoint}/health",
                headers={"x-schedule-hash": self.schedule.hash()},
                timeout=self.timeout,
            )
        except Exception as exc:
            raise GuidanceUnavailableError(f"health check failed: {exc}") from exc
        if r.status_code != 200 or r.text.strip() != "ok":
            raise GuidanceUnavailableError(
                f"health check rejected: status {r.status_code} body {r.text[:80]!r}"
            )

    def _post(self, body, headers):
        return self._http.post(
            f"{self.endpoint}/guidance", data=body, headers=headers, timeout=self.timeout
        )

    def gradient(self, crop, rect, iteration, t_frac, seed):
        body = pack_image(crop)
        headers = {
            "x-prompt": self.prompt,
            "x-timestep": f"{float(t_frac):.10f}",
            "x-seed": str(int(seed)),
            "content-type": "application/octet-stream",
        }
        last = None
        for _ in range(2):  # one retry on transport failure
            try:
                r = self._post(body, headers)
                if r.status_code != 200:
                    raise GuidanceUnavailableError(f"service returned {r.status_code}")
                grad = unpack_image(r.content)
                if grad.shape != np.asarray(crop).shape:
                    raise GuidanceUnavailableError("gradient shape mismatch")
                loss = r.headers.get("x-loss")
                return GuidanceResult(
                    gradient=grad, loss=float(loss) if loss is not None else None, rect=rect
                )
            except GuidanceUnavailableError as exc:
                last = exc
            except Exception as exc:
                last = GuidanceUnavailableError(f"transport failure: {exc}")
        raise last
