"""Tone mapping: Reinhard base curve, monotone rational-quadratic spline
residuals (one shared curve for the foreground, one per RGB channel for the
shadow ratio), and the pure power-law gamma codec.

Spline parameters are stored unconstrained (softmax bin widths/heights,
softplus knot derivatives) so the optimizer never needs projection. With all
raw parameters at zero-init the spline is the exact identity.
"""

import numpy as np

GAMMA = 2.2
N_BINS = 5
MIN_BIN = 1e-3
MIN_SLOPE = 1e-3


def reinhard(x):
    """x / (1 + x), componentwise; maps [0, inf) to [0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("radiance must be nonnegative")
    return x / (1.0 + x)


def reinhard_deriv(x):
    x = np.asarray(x, dtype=np.float64)
    return 1.0 / (1.0 + x) ** 2


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def _softplus(v):
    return np.logaddexp(0.0, v)


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


_IDENTITY_RAW_D = float(np.log(np.expm1(1.0 - MIN_SLOPE)))  # softplus^-1(1 - MIN_SLOPE)


class RqSpline:
    """Monotone rational-quadratic spline on [0, 1] with pinned endpoints.

    Each bin is a quotient of two quadratics parameterized by knot heights and
    derivatives; boundary derivatives are pinned to 1 so identity-init is
    exact. n_params == 3 * K - 1 (widths, heights, interior derivatives).
    """

    def __init__(self, raw=None, n_bins=N_BINS):
        self.n_bins = int(n_bins)
        if raw is None:
            raw = self.identity_raw(self.n_bins)
        raw = np.asarray(raw, dtype=np.float64).reshape(-1)
        if raw.shape[0] != 3 * self.n_bins - 1:
            raise ValueError("expected 3*K-1 raw parameters")
        self.raw = raw
        self._build()

    @staticmethod
    def identity_raw(n_bins=N_BINS):
        raw = np.zeros(3 * n_bins - 1)
        raw[2 * n_bins :] = _IDENTITY_RAW_D
        return raw

    @property
    def n_params(self):
        return 3 * self.n_bins - 1

    def _build(self):
        K = self.n_bins
        c = 1.0 - K * MIN_BIN
        self._sx = _softmax(self.raw[:K])
        self._sy = _softmax(self.raw[K : 2 * K])
        w = MIN_BIN + c * self._sx
        h = MIN_BIN + c * self._sy
        self.knot_x = np.concatenate([[0.0], np.cumsum(w)])
        self.knot_y = np.concatenate([[0.0], np.cumsum(h)])
        self.knot_x[-1] = 1.0
        self.knot_y[-1] = 1.0
        d = np.ones(K + 1)
        d[1:K] = MIN_SLOPE + _softplus(self.raw[2 * K :])
        self.knot_d = d

    def _locate(self, x):
        x = np.asarray(x, dtype=np.float64)
        k = np.clip(np.searchsorted(self.knot_x, x, side="right") - 1, 0, self.n_bins - 1)
        x0 = self.knot_x[k]
        w = self.knot_x[k + 1] - x0
        xi = np.clip((x - x0) / w, 0.0, 1.0)
        return k, w, xi

    def __call__(self, x):
        return self.evaluate(np.asarray(x))

    def evaluate(self, x):
        k, w, xi = self._locate(x)
        y0 = self.knot_y[k]
        h = self.knot_y[k + 1] - y0
        d0 = self.knot_d[k]
        d1 = self.knot_d[k + 1]
        s = h / w
        q = xi * (1.0 - xi)
        num = h * (s * xi**2 + d0 * q)
        den = s + (d0 + d1 - 2.0 * s) * q
        return y0 + num / den

    def derivative(self, x):
        k, w, xi = self._locate(x)
        h = self.knot_y[k + 1] - self.knot_y[k]
        d0 = self.knot_d[k]
        d1 = self.knot_d[k + 1]
        s = h / w
        q = xi * (1.0 - xi)
        den = s + (d0 + d1 - 2.0 * s) * q
        return s**2 * (d1 * xi**2 + 2.0 * s * q + d0 * (1.0 - xi) ** 2) / den**2

    def vjp(self, x, upstream):
        """(grad_x, grad_raw) for sum(upstream * evaluate(x))."""
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(upstream, dtype=np.float64)
        k, w, xi = self._locate(x)
        K = self.n_bins
        h = self.knot_y[k + 1] - self.knot_y[k]
        d0 = self.knot_d[k]
        d1 = self.knot_d[k + 1]
        q = xi * (1.0 - xi)
        num = (h**2 / w) * xi**2 + h * d0 * q
        den = h / w + (d0 + d1 - 2.0 * h / w) * q
        A = 1.0 / den
        B = -num / den**2

        g_xi = A * (2.0 * h**2 * xi / w + h * d0 * (1.0 - 2.0 * xi)) + B * (
            (d0 + d1 - 2.0 * h / w) * (1.0 - 2.0 * xi)
        )
        g_w = A * (-(h**2) * xi**2 / w**2) + B * (-h * (1.0 - 2.0 * q) / w**2)
        g_h = A * (2.0 * h * xi**2 / w + d0 * q) + B * ((1.0 - 2.0 * q) / w)
        g_d0 = A * h * q + B * q
        g_d1 = B * q

        grad_x = u * g_xi / w

        gxs = np.zeros(K + 1)
        gys = np.zeros(K + 1)
        gds = np.zeros(K + 1)
        np.add.at(gxs, k, u * (g_xi * (xi - 1.0) / w - g_w))
        np.add.at(gxs, k + 1, u * (-g_xi * xi / w + g_w))
        np.add.at(gys, k, u * (1.0 - g_h))
        np.add.at(gys, k + 1, u * g_h)
        np.add.at(gds, k, u * g_d0)
        np.add.at(gds, k + 1, u * g_d1)

        # knots -> raw: cumsum transpose, then softmax / softplus jacobians
        c = 1.0 - K * MIN_BIN
        gw_bins = np.cumsum(gxs[::-1])[::-1][1:]  # d/dw_i = sum_{j > i} gxs_j
        gh_bins = np.cumsum(gys[::-1])[::-1][1:]
        graw = np.empty(self.n_params)
        graw[:K] = c * self._sx * (gw_bins - (self._sx * gw_bins).sum())
        graw[K : 2 * K] = c * self._sy * (gh_bins - (self._sy * gh_bins).sum())
        graw[2 * K :] = gds[1:K] * _sigmoid(self.raw[2 * K :])
        return grad_x, graw

    def inverse(self, y, tol=1e-12, max_iter=100):
        """Numerical inverse by bisection; valid because the map is monotone."""
        y = np.asarray(y, dtype=np.float64)
        lo = np.zeros_like(y)
        hi = np.ones_like(y)
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            below = self.evaluate(mid) < y
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) < tol:
                break
        return 0.5 * (lo + hi)


class ToneParams:
    """One shared spline for the foreground, three per-channel shadow splines."""

    def __init__(self, theta_fg=None, theta_shadow=None, n_bins=N_BINS):
        self.n_bins = n_bins
        self.fg = theta_fg if theta_fg is not None else RqSpline(n_bins=n_bins)
        self.shadow = (
            theta_shadow
            if theta_shadow is not None
            else [RqSpline(n_bins=n_bins) for _ in range(3)]
        )
        if len(self.shadow) != 3:
            raise ValueError("need one shadow spline per RGB channel")

    @property
    def n_fg_params(self):
        return self.fg.n_params

    @property
    def n_shadow_params(self):
        return 3 * self.shadow[0].n_params

    def fg_raw(self):
        return self.fg.raw.copy()

    def shadow_raw(self):
        return np.concatenate([s.raw for s in self.shadow])

    @classmethod
    def from_raw(cls, fg_raw, shadow_raw, n_bins=N_BINS):
        p = np.asarray(shadow_raw, dtype=np.float64).reshape(3, -1)
        return cls(RqSpline(fg_raw, n_bins), [RqSpline(p[c], n_bins) for c in range(3)], n_bins)


def apply_fg_tone(img_linear, tone: ToneParams):
    """spline(reinhard(x)) with the shared foreground spline on each channel."""
    return tone.fg.evaluate(reinhard(img_linear))


def apply_fg_tone_vjp(img_linear, tone: ToneParams, upstream):
    """(grad_image, grad_fg_raw) for the composed foreground tone map."""
    r = reinhard(img_linear)
    g_r, g_raw = tone.fg.vjp(r, upstream)
    return g_r * reinhard_deriv(img_linear), g_raw


def apply_shadow_tone(beta, tone: ToneParams):
    """Per-channel splines on clamp(beta, 0, 1); values above 1 pass through."""
    beta = np.asarray(beta, dtype=np.float64)
    out = np.empty_like(beta)
    for c in range(3):
        b = beta[..., c]
        over = b > 1.0
        out[..., c] = np.where(over, b, tone.shadow[c].evaluate(np.clip(b, 0.0, 1.0)))
    return out


def apply_shadow_tone_vjp(beta, tone: ToneParams, upstream):
    """(grad_beta, grad_shadow_raw); the >1 passthrough has unit gradient."""
    beta = np.asarray(beta, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    grad_beta = np.empty_like(beta)
    grads = []
    for c in range(3):
        b = beta[..., c]
        over = b > 1.0
        gx, graw = tone.shadow[c].vjp(np.clip(b, 0.0, 1.0), np.where(over, 0.0, u[..., c]))
        grad_beta[..., c] = np.where(over, u[..., c], gx)
        grads.append(graw)
    return grad_beta, np.concatenate(grads)


def srgb_decode(img_u8):
    """8-bit image -> linear via the pure power law (gamma 2.2)."""
    a = np.asarray(img_u8)
    if a.dtype == np.uint8:
        a = a.astype(np.float64) / 255.0
    return np.clip(a, 0.0, 1.0) ** GAMMA


def srgb_encode(img_linear):
    """Linear -> 8-bit via the pure power law; input clamped to [0, 1]."""
    x = np.clip(np.asarray(img_linear, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * x ** (1.0 / GAMMA)).astype(np.uint8)
