"""Object BSDF: a Lambertian / GGX-microfacet metallic blend.

f = (1 - metallic) * base_color/pi
  + metallic * D(h) G(wi, wo) F(h, wi) / (4 cos_i cos_o),   F0 = base_color

The proxy plane is pure Lambertian (handled inline by the tracer; its albedo
cancels in the shadow ratio). The numba cores below operate on scalar
components so the tracer kernels stay allocation-free; the module-level
functions are the reference API. `_bsdf_eval_grad_s` additionally returns
d(f)/d(base_color, metallic, roughness) for the adjoint pass.
"""

import numpy as np
from numba import njit

from .scenegraph import MaterialParams

_INV_PI = 1.0 / np.pi


@njit(cache=True, inline="always")
def _onb(nx, ny, nz):
    """Orthonormal basis around a unit normal (Frisvad construction)."""
    sign = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    t0x, t0y, t0z = 1.0 + sign * nx * nx * a, sign * b, -sign * nx
    t1x, t1y, t1z = b, sign + ny * ny * a, -ny
    return t0x, t0y, t0z, t1x, t1y, t1z


@njit(cache=True, inline="always")
def _ggx_d(alpha, nh):
    a2 = alpha * alpha
    t = nh * nh * (a2 - 1.0) + 1.0
    return a2 / (np.pi * t * t)


@njit(cache=True, inline="always")
def _smith_g1(alpha, c):
    a2 = alpha * alpha
    return 2.0 * c / (c + np.sqrt(a2 + (1.0 - a2) * c * c))


@njit(cache=True, inline="always")
def _bsdf_eval_s(mat, nx, ny, nz, wix, wiy, wiz, wox, woy, woz):
    ci = wix * nx + wiy * ny + wiz * nz
    co = wox * nx + woy * ny + woz * nz
    if ci <= 0.0 or co <= 0.0:
        return 0.0, 0.0, 0.0
    m = mat[3]
    fr = (1.0 - m) * mat[0] * _INV_PI
    fg = (1.0 - m) * mat[1] * _INV_PI
    fb = (1.0 - m) * mat[2] * _INV_PI
    if m > 0.0:
        hx, hy, hz = wix + wox, wiy + woy, wiz + woz
        hl = np.sqrt(hx * hx + hy * hy + hz * hz)
        if hl > 1e-12:
            hx, hy, hz = hx / hl, hy / hl, hz / hl
            nh = nx * hx + ny * hy + nz * hz
            hi = hx * wix + hy * wiy + hz * wiz
            if nh > 0.0 and hi > 0.0:
                alpha = mat[4] * mat[4]
                d = _ggx_d(alpha, nh)
                g = _smith_g1(alpha, ci) * _smith_g1(alpha, co)
                k = m * d * g / (4.0 * ci * co)
                s5 = (1.0 - hi) ** 5
                fr += k * (mat[0] + (1.0 - mat[0]) * s5)
                fg += k * (mat[1] + (1.0 - mat[1]) * s5)
                fb += k * (mat[2] + (1.0 - mat[2]) * s5)
    return fr, fg, fb


@njit(cache=True, inline="always")
def _bsdf_eval_grad_s(mat, gate, nx, ny, nz, wix, wiy, wiz, wox, woy, woz, out_f, out_df):
    """Fills out_f (3,) and out_df (3,5) = d f / d(base rgb, metallic, roughness)."""
    for c in range(3):
        out_f[c] = 0.0
        for p in range(5):
            out_df[c, p] = 0.0
    ci = wix * nx + wiy * ny + wiz * nz
    co = wox * nx + woy * ny + woz * nz
    if ci <= 0.0 or co <= 0.0:
        return
    m = mat[3]
    for c in range(3):
        out_f[c] = (1.0 - m) * mat[c] * _INV_PI
        out_df[c, c] = (1.0 - m) * _INV_PI * gate[c]
        out_df[c, 3] = -mat[c] * _INV_PI * gate[3]
    hx, hy, hz = wix + wox, wiy + woy, wiz + woz
    hl = np.sqrt(hx * hx + hy * hy + hz * hz)
    if hl <= 1e-12:
        return
    hx, hy, hz = hx / hl, hy / hl, hz / hl
    nh = nx * hx + ny * hy + nz * hz
    hi = hx * wix + hy * wiy + hz * wiz
    if nh <= 0.0 or hi <= 0.0:
        return
    r = mat[4]
    alpha = r * r
    a2 = alpha * alpha
    t = nh * nh * (alpha * alpha - 1.0) + 1.0
    d = a2 / (np.pi * t * t)
    dd_da = 2.0 * alpha / (np.pi * t * t) - 4.0 * alpha * a2 * nh * nh / (np.pi * t * t * t)
    s_i = np.sqrt(a2 + (1.0 - a2) * ci * ci)
    s_o = np.sqrt(a2 + (1.0 - a2) * co * co)
    g1i = 2.0 * ci / (ci + s_i)
    g1o = 2.0 * co / (co + s_o)
    g = g1i * g1o
    dg1i = -2.0 * ci * (alpha * (1.0 - ci * ci) / s_i) / ((ci + s_i) * (ci + s_i))
    dg1o = -2.0 * co * (alpha * (1.0 - co * co) / s_o) / ((co + s_o) * (co + s_o))
    dg_da = dg1i * g1o + g1i * dg1o
    base_k = 1.0 / (4.0 * ci * co)
    k = m * d * g * base_k
    dk_drough = m * (dd_da * g + d * dg_da) * base_k * 2.0 * r  # d alpha / d rough = 2r
    s5 = (1.0 - hi) ** 5
    for c in range(3):
        f0 = mat[c]
        fres = f0 + (1.0 - f0) * s5
        out_f[c] += k * fres
        out_df[c, c] += k * (1.0 - s5) * gate[c]
        out_df[c, 3] += d * g * base_k * fres * gate[3]
        out_df[c, 4] += dk_drough * fres * gate[4]


@njit(cache=True, inline="always")
def _bsdf_pdf_s(mat, nx, ny, nz, wix, wiy, wiz, wox, woy, woz):
    ci = wix * nx + wiy * ny + wiz * nz
    co = wox * nx + woy * ny + woz * nz
    if ci <= 0.0 or co <= 0.0:
        return 0.0
    m = mat[3]
    pdf = (1.0 - m) * ci * _INV_PI
    if m > 0.0:
        hx, hy, hz = wix + wox, wiy + woy, wiz + woz
        hl = np.sqrt(hx * hx + hy * hy + hz * hz)
        if hl > 1e-12:
            hx, hy, hz = hx / hl, hy / hl, hz / hl
            nh = nx * hx + ny * hy + nz * hz
            oh = hx * wox + hy * woy + hz * woz
            if nh > 0.0 and oh > 1e-9:
                alpha = mat[4] * mat[4]
                pdf += m * _ggx_d(alpha, nh) * nh / (4.0 * oh)
    return pdf


@njit(cache=True, inline="always")
def _cosine_sample_s(nx, ny, nz, u1, u2):
    t0x, t0y, t0z, t1x, t1y, t1z = _onb(nx, ny, nz)
    rad = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    lx = rad * np.cos(phi)
    ly = rad * np.sin(phi)
    lz = np.sqrt(max(0.0, 1.0 - u1))
    wx = lx * t0x + ly * t1x + lz * nx
    wy = lx * t0y + ly * t1y + lz * ny
    wz = lx * t0z + ly * t1z + lz * nz
    return wx, wy, wz


@njit(cache=True, inline="always")
def _bsdf_sample_s(mat, nx, ny, nz, wox, woy, woz, u1, u2):
    """Returns (wi, pdf). Lobe choice folds into u1 (rescaled reuse)."""
    m = mat[3]
    if u1 < m:
        u1p = u1 / m
        alpha = mat[4] * mat[4]
        c2 = (1.0 - u1p) / (1.0 + (alpha * alpha - 1.0) * u1p)
        ch = np.sqrt(max(0.0, min(1.0, c2)))
        sh = np.sqrt(max(0.0, 1.0 - c2))
        phi = 2.0 * np.pi * u2
        t0x, t0y, t0z, t1x, t1y, t1z = _onb(nx, ny, nz)
        hx = sh * np.cos(phi) * t0x + sh * np.sin(phi) * t1x + ch * nx
        hy = sh * np.cos(phi) * t0y + sh * np.sin(phi) * t1y + ch * ny
        hz = sh * np.cos(phi) * t0z + sh * np.sin(phi) * t1z + ch * nz
        oh = wox * hx + woy * hy + woz * hz
        wix = 2.0 * oh * hx - wox
        wiy = 2.0 * oh * hy - woy
        wiz = 2.0 * oh * hz - woz
    else:
        u1p = (u1 - m) / (1.0 - m) if m < 1.0 else 0.0
        wix, wiy, wiz = _cosine_sample_s(nx, ny, nz, u1p, u2)
    if wix * nx + wiy * ny + wiz * nz <= 0.0:
        return 0.0, 0.0, 0.0, 0.0
    pdf = _bsdf_pdf_s(mat, nx, ny, nz, wix, wiy, wiz, wox, woy, woz)
    return wix, wiy, wiz, pdf


# ---------------------------------------------------------------------------
# reference API


def _packed(material):
    if isinstance(material, MaterialParams):
        return material.packed()
    return np.asarray(material, dtype=np.float64).reshape(8)


def bsdf_eval(material, normal, wi, wo):
    """Reflectance per steradian; zero when either direction is below surface."""
    mat = _packed(material)
    n = np.asarray(normal, dtype=np.float64)
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    return np.array(_bsdf_eval_s(mat, n[0], n[1], n[2], wi[0], wi[1], wi[2], wo[0], wo[1], wo[2]))


def bsdf_pdf(material, normal, wi, wo):
    mat = _packed(material)
    n = np.asarray(normal, dtype=np.float64)
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    return float(_bsdf_pdf_s(mat, n[0], n[1], n[2], wi[0], wi[1], wi[2], wo[0], wo[1], wo[2]))


def bsdf_sample(material, normal, wo, u1, u2):
    """(wi, pdf, weight) with weight = f * cos / pdf; pdf == bsdf_pdf(wi)."""
    mat = _packed(material)
    n = np.asarray(normal, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    wix, wiy, wiz, pdf = _bsdf_sample_s(
        mat, n[0], n[1], n[2], wo[0], wo[1], wo[2], float(u1), float(u2)
    )
    wi = np.array([wix, wiy, wiz])
    if pdf <= 0.0:
        return wi, 0.0, np.zeros(3)
    f = bsdf_eval(mat, n, wi, wo)
    return wi, pdf, f * float(wi @ n) / pdf
