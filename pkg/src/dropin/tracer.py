"""Deterministic-replay Monte Carlo renderer.

Foreground: path-traced radiance of the inserted object lit by an
environment map, MIS (balance heuristic) between emitter and BSDF sampling at
every bounce. Shadow ratio: per-pixel direct-lighting ratio on the proxy
plane with and without the object, sharing the exact same sample sequences so
unoccluded pixels are bitwise 1. Compositing follows
(1 - V) * beta * bg + V * fg.

Determinism: every random draw is keyed by (seed, pixel, sample, bounce,
purpose) through the counter-based generator, and gradient accumulation uses
a fixed number of chunks merged in a fixed order, so results are bitwise
identical for any thread count. The sampling distribution (CDF/pdf tables)
and all sampled directions are detached: adjoint kernels replay the forward
sample set and propagate gradients only through emitter radiance and BSDF
values.
"""

import numpy as np
from dataclasses import dataclass, replace as dc_replace
from numba import njit, prange

from .errors import DegenerateDistributionError
from .lightfield import EnvironmentMap, SgLightingParams, envmap_bake, build_sampling_tables, _sample_env_dir, _dir_to_pixel, LUMA_WEIGHTS
from .bsdf import _bsdf_eval_s, _bsdf_eval_grad_s, _bsdf_pdf_s, _bsdf_sample_s, _cosine_sample_s
from .rng import _u2, PRIMARY, NEE, BSDF_MIS, CONTINUATION, SHADOW_NEE, SHADOW_BSDF
from .scenegraph import Scene

N_CHUNKS = 64
T_MIN = 1e-7
OFFSET = 1e-6
DENOM_FLOOR = 1e-7
INV_PI = 1.0 / np.pi


@dataclass(frozen=True)
class RenderSettings:
    spp: int = 128
    mis_rays: int = 4
    max_depth: int = 3          # foreground; the shadow ratio is fixed at depth 1
    resolution: tuple | None = None  # None -> camera resolution
    base_seed: int = 0

    def __post_init__(self):
        if self.spp < 1 or self.mis_rays < 1 or self.max_depth < 1:
            raise ValueError("spp, mis_rays and max_depth must be >= 1")


@dataclass
class RenderOutputs:
    i_fg: np.ndarray
    beta_shadow: np.ndarray
    visibility: np.ndarray
    i_comp: np.ndarray | None = None


def mis_weight(pdf_a, pdf_b):
    """Balance heuristic pdf_a / (pdf_a + pdf_b)."""
    if pdf_a < 0 or pdf_b < 0 or not (np.isfinite(pdf_a) and np.isfinite(pdf_b)):
        raise ValueError("pdfs must be finite and nonnegative")
    if pdf_a == 0.0 and pdf_b == 0.0:
        raise ValueError("at least one pdf must be positive")
    return pdf_a / (pdf_a + pdf_b)


def composite(bg_linear, fg_toned, beta_toned, visibility):
    """(1 - V) * beta * bg + V * fg, elementwise."""
    bg = np.asarray(bg_linear, dtype=np.float64)
    fg = np.asarray(fg_toned, dtype=np.float64)
    bt = np.asarray(beta_toned, dtype=np.float64)
    v = np.asarray(visibility, dtype=np.float64)
    if not (bg.shape == fg.shape == bt.shape and v.shape == bg.shape[:2]):
        raise ValueError("composite inputs must share resolution")
    return (1.0 - v)[:, :, None] * bt * bg + v[:, :, None] * fg


# ---------------------------------------------------------------------------
# geometry cores


@njit(cache=True, inline="always")
def _hit_tri(v0, e1, e2, ti, ox, oy, oz, dx, dy, dz):
    e1x, e1y, e1z = e1[ti, 0], e1[ti, 1], e1[ti, 2]
    e2x, e2y, e2z = e2[ti, 0], e2[ti, 1], e2[ti, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    sx = ox - v0[ti, 0]
    sy = oy - v0[ti, 1]
    sz = oz - v0[ti, 2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@njit(cache=True, inline="always")
def _hit_aabb(bmin, bmax, node, ox, oy, oz, ix, iy, iz, tmax):
    t1 = (bmin[node, 0] - ox) * ix
    t2 = (bmax[node, 0] - ox) * ix
    tlo = min(t1, t2)
    thi = max(t1, t2)
    t1 = (bmin[node, 1] - oy) * iy
    t2 = (bmax[node, 1] - oy) * iy
    tlo = max(tlo, min(t1, t2))
    thi = min(thi, max(t1, t2))
    t1 = (bmin[node, 2] - oz) * iz
    t2 = (bmax[node, 2] - oz) * iz
    tlo = max(tlo, min(t1, t2))
    thi = min(thi, max(t1, t2))
    return thi >= tlo and tlo <= tmax and thi >= 0.0


@njit(cache=True, inline="always")
def _inv_dir(d):
    s = 1.0 if d >= 0.0 else -1.0
    return s / max(abs(d), 1e-300)


@njit(cache=True, inline="always")
def _bvh_nearest(v0, e1, e2, bmin, bmax, left, right, stack, ox, oy, oz, dx, dy, dz):
    best_t = np.inf
    best_i = -1
    best_u = 0.0
    best_v = 0.0
    if bmin.shape[0] == 0:
        return best_i, best_t, best_u, best_v
    ix = _inv_dir(dx)
    iy = _inv_dir(dy)
    iz = _inv_dir(dz)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _hit_aabb(bmin, bmax, node, ox, oy, oz, ix, iy, iz, best_t):
            continue
        l = left[node]
        if l < 0:
            start = -l - 1
            for k in range(right[node]):
                ti = start + k
                t, u, v = _hit_tri(v0, e1, e2, ti, ox, oy, oz, dx, dy, dz)
                if T_MIN < t < best_t:
                    best_t = t
                    best_i = ti
                    best_u = u
                    best_v = v
        else:
            stack[sp] = l
            sp += 1
            stack[sp] = right[node]
            sp += 1
    return best_i, best_t, best_u, best_v


@njit(cache=True, inline="always")
def _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, ox, oy, oz, dx, dy, dz, tmax):
    if bmin.shape[0] == 0:
        return False
    ix = _inv_dir(dx)
    iy = _inv_dir(dy)
    iz = _inv_dir(dz)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _hit_aabb(bmin, bmax, node, ox, oy, oz, ix, iy, iz, tmax):
            continue
        l = left[node]
        if l < 0:
            start = -l - 1
            for k in range(right[node]):
                t, _, _ = _hit_tri(v0, e1, e2, start + k, ox, oy, oz, dx, dy, dz)
                if T_MIN < t < tmax:
                    return True
        else:
            stack[sp] = l
            sp += 1
            stack[sp] = right[node]
            sp += 1
    return False


@njit(cache=True, inline="always")
def _plane_hit(ppt, pn, pu, pv, phe, ox, oy, oz, dx, dy, dz):
    denom = dx * pn[0] + dy * pn[1] + dz * pn[2]
    if abs(denom) < 1e-12:
        return np.inf
    t = ((ppt[0] - ox) * pn[0] + (ppt[1] - oy) * pn[1] + (ppt[2] - oz) * pn[2]) / denom
    if t <= T_MIN:
        return np.inf
    rx = ox + t * dx - ppt[0]
    ry = oy + t * dy - ppt[1]
    rz = oz + t * dz - ppt[2]
    if abs(rx * pu[0] + ry * pu[1] + rz * pu[2]) > phe[0]:
        return np.inf
    if abs(rx * pv[0] + ry * pv[1] + rz * pv[2]) > phe[1]:
        return np.inf
    return t


@njit(cache=True, inline="always")
def _cam_ray(cam_pos, cam_rot, half_w, half_h, rows, cols, i, j, su, sv):
    x = (2.0 * (j + su) / cols - 1.0) * half_w
    y = (1.0 - 2.0 * (i + sv) / rows) * half_h
    dx = cam_rot[0, 0] * x + cam_rot[0, 1] * y - cam_rot[0, 2]
    dy = cam_rot[1, 0] * x + cam_rot[1, 1] * y - cam_rot[1, 2]
    dz = cam_rot[2, 0] * x + cam_rot[2, 1] * y - cam_rot[2, 2]
    inv = 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz)
    return cam_pos[0], cam_pos[1], cam_pos[2], dx * inv, dy * inv, dz * inv


@njit(cache=True, inline="always")
def _shading_normal(n0, n1, n2, ti, u, v, dx, dy, dz):
    w0 = 1.0 - u - v
    nx = w0 * n0[ti, 0] + u * n1[ti, 0] + v * n2[ti, 0]
    ny = w0 * n0[ti, 1] + u * n1[ti, 1] + v * n2[ti, 1]
    nz = w0 * n0[ti, 2] + u * n1[ti, 2] + v * n2[ti, 2]
    inv = 1.0 / max(np.sqrt(nx * nx + ny * ny + nz * nz), 1e-12)
    nx, ny, nz = nx * inv, ny * inv, nz * inv
    if nx * dx + ny * dy + nz * dz > 0.0:  # orient against the ray
        nx, ny, nz = -nx, -ny, -nz
    return nx, ny, nz


# ---------------------------------------------------------------------------
# forward kernels


@njit(cache=True, parallel=True)
def k_visibility(seed, spp, rows, cols, cam_pos, cam_rot, half_w, half_h,
                 v0, e1, e2, bmin, bmax, left, right, out):
    npix = rows * cols
    for chunk in prange(N_CHUNKS):
        stack = np.empty(128, np.int64)
        for p in range(chunk * npix // N_CHUNKS, (chunk + 1) * npix // N_CHUNKS):
            i = p // cols
            j = p - i * cols
            hits = 0
            for s in range(spp):
                su, sv = _u2(seed, p, s, 0, PRIMARY)
                ox, oy, oz, dx, dy, dz = _cam_ray(cam_pos, cam_rot, half_w, half_h, rows, cols, i, j, su, sv)
                ti, _, _, _ = _bvh_nearest(v0, e1, e2, bmin, bmax, left, right, stack, ox, oy, oz, dx, dy, dz)
                if ti >= 0:
                    hits += 1
            out[i, j] = hits / spp


@njit(cache=True, parallel=True)
def k_foreground(seed, spp, mis_rays, max_depth, rows, cols,
                 cam_pos, cam_rot, half_w, half_h,
                 v0, e1, e2, n0, n1, n2, bmin, bmax, left, right,
                 mat_eval, mat_sample,
                 light, cdf, pdfg,
                 out):
    H = light.shape[0]
    W = light.shape[1]
    npix = rows * cols
    for chunk in prange(N_CHUNKS):
        stack = np.empty(128, np.int64)
        for p in range(chunk * npix // N_CHUNKS, (chunk + 1) * npix // N_CHUNKS):
            i = p // cols
            j = p - i * cols
            acc_r = acc_g = acc_b = 0.0
            hits = 0
            for s in range(spp):
                su, sv = _u2(seed, p, s, 0, PRIMARY)
                ox, oy, oz, dx, dy, dz = _cam_ray(cam_pos, cam_rot, half_w, half_h, rows, cols, i, j, su, sv)
                ti, t, bu, bv = _bvh_nearest(v0, e1, e2, bmin, bmax, left, right, stack, ox, oy, oz, dx, dy, dz)
                if ti < 0:
                    continue
                hits += 1
                # first hit: emission
                acc_r += mat_eval[5]
                acc_g += mat_eval[6]
                acc_b += mat_eval[7]
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                nx, ny, nz = _shading_normal(n0, n1, n2, ti, bu, bv, dx, dy, dz)
                wox, woy, woz = -dx, -dy, -dz
                t_r = t_g = t_b = 1.0
                for bounce in range(max_depth):
                    sx = px + nx * OFFSET
                    sy = py + ny * OFFSET
                    sz = pz + nz * OFFSET
                    for k in range(mis_rays):
                        u1, u2 = _u2(seed, p, s, bounce * 256 + k, NEE)
                        wx, wy, wz, ei, ej = _sample_env_dir(cdf, H, W, u1, u2)
                        cosi = wx * nx + wy * ny + wz * nz
                        pe = pdfg[ei, ej]
                        if cosi > 0.0 and pe > 0.0:
                            if not _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz, np.inf):
                                fr, fg, fb = _bsdf_eval_s(mat_eval, nx, ny, nz, wx, wy, wz, wox, woy, woz)
                                pb = _bsdf_pdf_s(mat_sample, nx, ny, nz, wx, wy, wz, wox, woy, woz)
                                scale = cosi * (pe / (pe + pb)) / (pe * mis_rays)
                                acc_r += t_r * fr * light[ei, ej, 0] * scale
                                acc_g += t_g * fg * light[ei, ej, 1] * scale
                                acc_b += t_b * fb * light[ei, ej, 2] * scale
                    for k in range(mis_rays):
                        u1, u2 = _u2(seed, p, s, bounce * 256 + k, BSDF_MIS)
                        wx, wy, wz, pb = _bsdf_sample_s(mat_sample, nx, ny, nz, wox, woy, woz, u1, u2)
                        if pb > 0.0:
                            cosi = wx * nx + wy * ny + wz * nz
                            if not _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz, np.inf):
                                ei, ej = _dir_to_pixel(wx, wy, wz, H, W)
                                pe = pdfg[ei, ej]
                                fr, fg, fb = _bsdf_eval_s(mat_eval, nx, ny, nz, wx, wy, wz, wox, woy, woz)
                                scale = cosi * (pb / (pb + pe)) / (pb * mis_rays)
                                acc_r += t_r * fr * light[ei, ej, 0] * scale
                                acc_g += t_g * fg * light[ei, ej, 1] * scale
                                acc_b += t_b * fb * light[ei, ej, 2] * scale
                    if bounce + 1 >= max_depth:
                        break
                    u1, u2 = _u2(seed, p, s, bounce, CONTINUATION)
                    wx, wy, wz, pb = _bsdf_sample_s(mat_sample, nx, ny, nz, wox, woy, woz, u1, u2)
                    if pb <= 0.0:
                        break
                    ti2, t2, bu2, bv2 = _bvh_nearest(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz)
                    if ti2 < 0:
                        break  # escape already handled by the MIS estimator
                    cosi = wx * nx + wy * ny + wz * nz
                    fr, fg, fb = _bsdf_eval_s(mat_eval, nx, ny, nz, wx, wy, wz, wox, woy, woz)
                    t_r *= fr * cosi / pb
                    t_g *= fg * cosi / pb
                    t_b *= fb * cosi / pb
                    if t_r <= 0.0 and t_g <= 0.0 and t_b <= 0.0:
                        break
                    px = sx + t2 * wx
                    py = sy + t2 * wy
                    pz = sz + t2 * wz
                    nx, ny, nz = _shading_normal(n0, n1, n2, ti2, bu2, bv2, wx, wy, wz)
                    wox, woy, woz = -wx, -wy, -wz
            if hits > 0:
                out[i, j, 0] = acc_r / hits
                out[i, j, 1] = acc_g / hits
                out[i, j, 2] = acc_b / hits


@njit(cache=True, parallel=True)
def k_shadow(seed, spp, mis_rays, rows, cols,
             cam_pos, cam_rot, half_w, half_h,
             v0, e1, e2, bmin, bmax, left, right,
             ppt, pn, pu, pv, phe,
             light, cdf, pdfg,
             beta, guard_counts):
    H = light.shape[0]
    W = light.shape[1]
    npix = rows * cols
    for chunk in prange(N_CHUNKS):
        stack = np.empty(128, np.int64)
        guards = 0
        for p in range(chunk * npix // N_CHUNKS, (chunk + 1) * npix // N_CHUNKS):
            i = p // cols
            j = p - i * cols
            num_r = num_g = num_b = 0.0
            den_r = den_g = den_b = 0.0
            plane_hits = 0
            for s in range(spp):
                su, sv = _u2(seed, p, s, 0, PRIMARY)
                ox, oy, oz, dx, dy, dz = _cam_ray(cam_pos, cam_rot, half_w, half_h, rows, cols, i, j, su, sv)
                t = _plane_hit(ppt, pn, pu, pv, phe, ox, oy, oz, dx, dy, dz)
                if t == np.inf:
                    continue
                plane_hits += 1
                nx, ny, nz = pn[0], pn[1], pn[2]
                if nx * dx + ny * dy + nz * dz > 0.0:
                    nx, ny, nz = -nx, -ny, -nz
                sx = ox + t * dx + nx * OFFSET
                sy = oy + t * dy + ny * OFFSET
                sz = oz + t * dz + nz * OFFSET
                for k in range(mis_rays):
                    u1, u2 = _u2(seed, p, s, k, SHADOW_NEE)
                    wx, wy, wz, ei, ej = _sample_env_dir(cdf, H, W, u1, u2)
                    cosi = wx * nx + wy * ny + wz * nz
                    pe = pdfg[ei, ej]
                    if cosi > 0.0 and pe > 0.0:
                        pb = cosi * INV_PI
                        a = cosi * INV_PI * (pe / (pe + pb)) / (pe * mis_rays)
                        cr = a * light[ei, ej, 0]
                        cg = a * light[ei, ej, 1]
                        cb = a * light[ei, ej, 2]
                        den_r += cr
                        den_g += cg
                        den_b += cb
                        if not _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz, np.inf):
                            num_r += cr
                            num_g += cg
                            num_b += cb
                for k in range(mis_rays):
                    u1, u2 = _u2(seed, p, s, k, SHADOW_BSDF)
                    wx, wy, wz = _cosine_sample_s(nx, ny, nz, u1, u2)
                    cosi = wx * nx + wy * ny + wz * nz
                    if cosi <= 0.0:
                        continue
                    pb = cosi * INV_PI
                    ei, ej = _dir_to_pixel(wx, wy, wz, H, W)
                    pe = pdfg[ei, ej]
                    a = cosi * INV_PI * (pb / (pb + pe)) / (pb * mis_rays)
                    cr = a * light[ei, ej, 0]
                    cg = a * light[ei, ej, 1]
                    cb = a * light[ei, ej, 2]
                    den_r += cr
                    den_g += cg
                    den_b += cb
                    if not _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz, np.inf):
                        num_r += cr
                        num_g += cg
                        num_b += cb
            if plane_hits == 0:
                beta[i, j, 0] = 1.0
                beta[i, j, 1] = 1.0
                beta[i, j, 2] = 1.0
            elif den_r * 0.2126 + den_g * 0.7152 + den_b * 0.0722 < DENOM_FLOOR:
                beta[i, j, 0] = 1.0
                beta[i, j, 1] = 1.0
                beta[i, j, 2] = 1.0
                guards += 1
            else:
                beta[i, j, 0] = num_r / den_r
                beta[i, j, 1] = num_g / den_g
                beta[i, j, 2] = num_b / den_b
        guard_counts[chunk] = guards


# ---------------------------------------------------------------------------
# adjoint kernels (path replay; sampling decisions detached)


@njit(cache=True, parallel=True)
def k_foreground_adj(seed, spp, mis_rays, max_depth, rows, cols,
                     cam_pos, cam_rot, half_w, half_h,
                     v0, e1, e2, n0, n1, n2, bmin, bmax, left, right,
                     mat_eval, mat_sample, mat_gate,
                     light, cdf, pdfg,
                     upstream, env_grad, mat_grad):
    H = light.shape[0]
    W = light.shape[1]
    npix = rows * cols
    for chunk in prange(N_CHUNKS):
        stack = np.empty(128, np.int64)
        fbuf = np.empty(3, np.float64)
        dfbuf = np.empty((3, 5), np.float64)
        tcur = np.empty(3, np.float64)
        dtcur = np.empty((3, 5), np.float64)
        for p in range(chunk * npix // N_CHUNKS, (chunk + 1) * npix // N_CHUNKS):
            i = p // cols
            j = p - i * cols
            ur = upstream[i, j, 0]
            ug = upstream[i, j, 1]
            ub = upstream[i, j, 2]
            if ur == 0.0 and ug == 0.0 and ub == 0.0:
                continue
            hits = 0
            for s in range(spp):
                su, sv = _u2(seed, p, s, 0, PRIMARY)
                ox, oy, oz, dx, dy, dz = _cam_ray(cam_pos, cam_rot, half_w, half_h, rows, cols, i, j, su, sv)
                ti, _, _, _ = _bvh_nearest(v0, e1, e2, bmin, bmax, left, right, stack, ox, oy, oz, dx, dy, dz)
                if ti >= 0:
                    hits += 1
            if hits == 0:
                continue
            wr = ur / hits
            wg = ug / hits
            wb = ub / hits
            for s in range(spp):
                su, sv = _u2(seed, p, s, 0, PRIMARY)
                ox, oy, oz, dx, dy, dz = _cam_ray(cam_pos, cam_rot, half_w, half_h, rows, cols, i, j, su, sv)
                ti, t, bu, bv = _bvh_nearest(v0, e1, e2, bmin, bmax, left, right, stack, ox, oy, oz, dx, dy, dz)
                if ti < 0:
                    continue
                # emission at first hit
                mat_grad[chunk, 5] += wr * mat_gate[5]
                mat_grad[chunk, 6] += wg * mat_gate[6]
                mat_grad[chunk, 7] += wb * mat_gate[7]
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                nx, ny, nz = _shading_normal(n0, n1, n2, ti, bu, bv, dx, dy, dz)
                wox, woy, woz = -dx, -dy, -dz
                for c in range(3):
                    tcur[c] = 1.0
                    for q in range(5):
                        dtcur[c, q] = 0.0
                for bounce in range(max_depth):
                    sx = px + nx * OFFSET
                    sy = py + ny * OFFSET
                    sz = pz + nz * OFFSET
                    for k in range(mis_rays):
                        u1, u2 = _u2(seed, p, s, bounce * 256 + k, NEE)
                        wx, wy, wz, ei, ej = _sample_env_dir(cdf, H, W, u1, u2)
                        cosi = wx * nx + wy * ny + wz * nz
                        pe = pdfg[ei, ej]
                        if cosi > 0.0 and pe > 0.0:
                            if not _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz, np.inf):
                                _bsdf_eval_grad_s(mat_eval, mat_gate, nx, ny, nz, wx, wy, wz, wox, woy, woz, fbuf, dfbuf)
                                pb = _bsdf_pdf_s(mat_sample, nx, ny, nz, wx, wy, wz, wox, woy, woz)
                                scale = cosi * (pe / (pe + pb)) / (pe * mis_rays)
                                base = (ei * W + ej) * 3
                                env_grad[chunk, base + 0] += wr * tcur[0] * fbuf[0] * scale
                                env_grad[chunk, base + 1] += wg * tcur[1] * fbuf[1] * scale
                                env_grad[chunk, base + 2] += wb * tcur[2] * fbuf[2] * scale
                                for q in range(5):
                                    mat_grad[chunk, q] += scale * (
                                        wr * light[ei, ej, 0] * (dtcur[0, q] * fbuf[0] + tcur[0] * dfbuf[0, q])
                                        + wg * light[ei, ej, 1] * (dtcur[1, q] * fbuf[1] + tcur[1] * dfbuf[1, q])
                                        + wb * light[ei, ej, 2] * (dtcur[2, q] * fbuf[2] + tcur[2] * dfbuf[2, q])
                                    )
                    for k in range(mis_rays):
                        u1, u2 = _u2(seed, p, s, bounce * 256 + k, BSDF_MIS)
                        wx, wy, wz, pb = _bsdf_sample_s(mat_sample, nx, ny, nz, wox, woy, woz, u1, u2)
                        if pb > 0.0:
                            cosi = wx * nx + wy * ny + wz * nz
                            if not _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz, np.inf):
                                ei, ej = _dir_to_pixel(wx, wy, wz, H, W)
                                pe = pdfg[ei, ej]
                                _bsdf_eval_grad_s(mat_eval, mat_gate, nx, ny, nz, wx, wy, wz, wox, woy, woz, fbuf, dfbuf)
                                scale = cosi * (pb / (pb + pe)) / (pb * mis_rays)
                                base = (ei * W + ej) * 3
                                env_grad[chunk, base + 0] += wr * tcur[0] * fbuf[0] * scale
                                env_grad[chunk, base + 1] += wg * tcur[1] * fbuf[1] * scale
                                env_grad[chunk, base + 2] += wb * tcur[2] * fbuf[2] * scale
                                for q in range(5):
                                    mat_grad[chunk, q] += scale * (
                                        wr * light[ei, ej, 0] * (dtcur[0, q] * fbuf[0] + tcur[0] * dfbuf[0, q])
                                        + wg * light[ei, ej, 1] * (dtcur[1, q] * fbuf[1] + tcur[1] * dfbuf[1, q])
                                        + wb * light[ei, ej, 2] * (dtcur[2, q] * fbuf[2] + tcur[2] * dfbuf[2, q])
                                    )
                    if bounce + 1 >= max_depth:
                        break
                    u1, u2 = _u2(seed, p, s, bounce, CONTINUATION)
                    wx, wy, wz, pb = _bsdf_sample_s(mat_sample, nx, ny, nz, wox, woy, woz, u1, u2)
                    if pb <= 0.0:
                        break
                    ti2, t2, bu2, bv2 = _bvh_nearest(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz)
                    if ti2 < 0:
                        break
                    cosi = wx * nx + wy * ny + wz * nz
                    _bsdf_eval_grad_s(mat_eval, mat_gate, nx, ny, nz, wx, wy, wz, wox, woy, woz, fbuf, dfbuf)
                    for c in range(3):
                        step = fbuf[c] * cosi / pb
                        for q in range(5):
                            dtcur[c, q] = dtcur[c, q] * step + tcur[c] * dfbuf[c, q] * cosi / pb
                        tcur[c] *= step
                    px = sx + t2 * wx
                    py = sy + t2 * wy
                    pz = sz + t2 * wz
                    nx, ny, nz = _shading_normal(n0, n1, n2, ti2, bu2, bv2, wx, wy, wz)
                    wox, woy, woz = -wx, -wy, -wz


@njit(cache=True, parallel=True)
def k_shadow_adj(seed, spp, mis_rays, rows, cols,
                 cam_pos, cam_rot, half_w, half_h,
                 v0, e1, e2, bmin, bmax, left, right,
                 ppt, pn, pu, pv, phe,
                 light, cdf, pdfg,
                 upstream, env_grad):
    H = light.shape[0]
    W = light.shape[1]
    npix = rows * cols
    for chunk in prange(N_CHUNKS):
        stack = np.empty(128, np.int64)
        for p in range(chunk * npix // N_CHUNKS, (chunk + 1) * npix // N_CHUNKS):
            i = p // cols
            j = p - i * cols
            ur = upstream[i, j, 0]
            ug = upstream[i, j, 1]
            ub = upstream[i, j, 2]
            if ur == 0.0 and ug == 0.0 and ub == 0.0:
                continue
            # pass 1: rebuild the numerator / denominator sums
            num_r = num_g = num_b = 0.0
            den_r = den_g = den_b = 0.0
            plane_hits = 0
            for s in range(spp):
                su, sv = _u2(seed, p, s, 0, PRIMARY)
                ox, oy, oz, dx, dy, dz = _cam_ray(cam_pos, cam_rot, half_w, half_h, rows, cols, i, j, su, sv)
                t = _plane_hit(ppt, pn, pu, pv, phe, ox, oy, oz, dx, dy, dz)
                if t == np.inf:
                    continue
                plane_hits += 1
                nx, ny, nz = pn[0], pn[1], pn[2]
                if nx * dx + ny * dy + nz * dz > 0.0:
                    nx, ny, nz = -nx, -ny, -nz
                sx = ox + t * dx + nx * OFFSET
                sy = oy + t * dy + ny * OFFSET
                sz = oz + t * dz + nz * OFFSET
                for k in range(mis_rays):
                    u1, u2 = _u2(seed, p, s, k, SHADOW_NEE)
                    wx, wy, wz, ei, ej = _sample_env_dir(cdf, H, W, u1, u2)
                    cosi = wx * nx + wy * ny + wz * nz
                    pe = pdfg[ei, ej]
                    if cosi > 0.0 and pe > 0.0:
                        pb = cosi * INV_PI
                        a = cosi * INV_PI * (pe / (pe + pb)) / (pe * mis_rays)
                        den_r += a * light[ei, ej, 0]
                        den_g += a * light[ei, ej, 1]
                        den_b += a * light[ei, ej, 2]
                        if not _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz, np.inf):
                            num_r += a * light[ei, ej, 0]
                            num_g += a * light[ei, ej, 1]
                            num_b += a * light[ei, ej, 2]
                for k in range(mis_rays):
                    u1, u2 = _u2(seed, p, s, k, SHADOW_BSDF)
                    wx, wy, wz = _cosine_sample_s(nx, ny, nz, u1, u2)
                    cosi = wx * nx + wy * ny + wz * nz
                    if cosi <= 0.0:
                        continue
                    pb = cosi * INV_PI
                    ei, ej = _dir_to_pixel(wx, wy, wz, H, W)
                    pe = pdfg[ei, ej]
                    a = cosi * INV_PI * (pb / (pb + pe)) / (pb * mis_rays)
                    den_r += a * light[ei, ej, 0]
                    den_g += a * light[ei, ej, 1]
                    den_b += a * light[ei, ej, 2]
                    if not _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz, np.inf):
                        num_r += a * light[ei, ej, 0]
                        num_g += a * light[ei, ej, 1]
                        num_b += a * light[ei, ej, 2]
            if plane_hits == 0:
                continue
            if den_r * 0.2126 + den_g * 0.7152 + den_b * 0.0722 < DENOM_FLOOR:
                continue  # guarded pixel: beta forced to 1, no gradient
            beta_r = num_r / den_r
            beta_g = num_g / den_g
            beta_b = num_b / den_b
            # pass 2: scatter d(beta)/d(light) = a * (vis - beta) / den
            for s in range(spp):
                su, sv = _u2(seed, p, s, 0, PRIMARY)
                ox, oy, oz, dx, dy, dz = _cam_ray(cam_pos, cam_rot, half_w, half_h, rows, cols, i, j, su, sv)
                t = _plane_hit(ppt, pn, pu, pv, phe, ox, oy, oz, dx, dy, dz)
                if t == np.inf:
                    continue
                nx, ny, nz = pn[0], pn[1], pn[2]
                if nx * dx + ny * dy + nz * dz > 0.0:
                    nx, ny, nz = -nx, -ny, -nz
                sx = ox + t * dx + nx * OFFSET
                sy = oy + t * dy + ny * OFFSET
                sz = oz + t * dz + nz * OFFSET
                for k in range(mis_rays):
                    u1, u2 = _u2(seed, p, s, k, SHADOW_NEE)
                    wx, wy, wz, ei, ej = _sample_env_dir(cdf, H, W, u1, u2)
                    cosi = wx * nx + wy * ny + wz * nz
                    pe = pdfg[ei, ej]
                    if cosi > 0.0 and pe > 0.0:
                        pb = cosi * INV_PI
                        a = cosi * INV_PI * (pe / (pe + pb)) / (pe * mis_rays)
                        vis = 0.0 if _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz, np.inf) else 1.0
                        base = (ei * W + ej) * 3
                        env_grad[chunk, base + 0] += ur * a * (vis - beta_r) / den_r
                        env_grad[chunk, base + 1] += ug * a * (vis - beta_g) / den_g
                        env_grad[chunk, base + 2] += ub * a * (vis - beta_b) / den_b
                for k in range(mis_rays):
                    u1, u2 = _u2(seed, p, s, k, SHADOW_BSDF)
                    wx, wy, wz = _cosine_sample_s(nx, ny, nz, u1, u2)
                    cosi = wx * nx + wy * ny + wz * nz
                    if cosi <= 0.0:
                        continue
                    pb = cosi * INV_PI
                    ei, ej = _dir_to_pixel(wx, wy, wz, H, W)
                    pe = pdfg[ei, ej]
                    a = cosi * INV_PI * (pb / (pb + pe)) / (pb * mis_rays)
                    vis = 0.0 if _bvh_anyhit(v0, e1, e2, bmin, bmax, left, right, stack, sx, sy, sz, wx, wy, wz, np.inf) else 1.0
                    base = (ei * W + ej) * 3
                    env_grad[chunk, base + 0] += ur * a * (vis - beta_r) / den_r
                    env_grad[chunk, base + 1] += ug * a * (vis - beta_g) / den_g
                    env_grad[chunk, base + 2] += ub * a * (vis - beta_b) / den_b


# ---------------------------------------------------------------------------
# wrappers


@njit(cache=True)
def _bvh_query(v0, e1, e2, bmin, bmax, left, right, o, d):
    stack = np.empty(128, np.int64)
    return _bvh_nearest(v0, e1, e2, bmin, bmax, left, right, stack,
                        o[0], o[1], o[2], d[0], d[1], d[2])


def bvh_nearest(mesh, origin, direction):
    """Nearest (tri_index, t, u, v) through the BVH; tri_index -1 on miss."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return _bvh_query(mesh.tri_v0, mesh.tri_e1, mesh.tri_e2,
                      mesh.bvh_min, mesh.bvh_max, mesh.bvh_left, mesh.bvh_right, o, d)


_EMPTY3 = np.zeros((0, 3), dtype=np.float64)
_EMPTY1 = np.zeros(0, dtype=np.int64)


def _mesh_arrays(scene: Scene):
    if scene.has_object:
        m = scene.object_mesh
        return (m.tri_v0, m.tri_e1, m.tri_e2, m.tri_n0, m.tri_n1, m.tri_n2,
                m.bvh_min, m.bvh_max, m.bvh_left, m.bvh_right)
    return (_EMPTY3, _EMPTY3, _EMPTY3, _EMPTY3, _EMPTY3, _EMPTY3, _EMPTY3, _EMPTY3, _EMPTY1, _EMPTY1)


def _camera_arrays(scene: Scene, settings: RenderSettings):
    cam = scene.camera
    if settings.resolution is not None and tuple(settings.resolution) != tuple(cam.resolution):
        cam = dc_replace(cam, resolution=tuple(settings.resolution))
    rows, cols = cam.resolution
    half_w, half_h = cam.half_extents()
    return cam.position, np.ascontiguousarray(cam.rotation), float(half_w), float(half_h), rows, cols


def _plane_arrays(scene: Scene):
    pl = scene.plane
    u, v = pl.basis()
    return pl.point, pl.normal, u, v, pl.half_extent


def as_envmap(lighting, H=128, W=256):
    if isinstance(lighting, EnvironmentMap):
        return lighting
    if isinstance(lighting, SgLightingParams):
        return envmap_bake(lighting, H, W)
    raise TypeError("lighting must be an EnvironmentMap or SgLightingParams")


def _tables(env: EnvironmentMap):
    """Sampling tables; an all-black map falls back to uniform sphere sampling
    so emission-only scenes still render (all light lookups are zero anyway)."""
    cached = getattr(env, "_tables", None)
    if cached is None:
        try:
            cached = build_sampling_tables(env)
        except DegenerateDistributionError:
            w = env.delta_omega.ravel()
            cdf = np.cumsum(w)
            cdf /= cdf[-1]
            pdf = np.full((env.height, env.width), 1.0 / (4.0 * np.pi))
            cached = (np.ascontiguousarray(cdf), pdf)
        env._tables = cached
    return cached


def render_foreground(scene: Scene, lighting, settings: RenderSettings, sample_map=None,
                      material=None, material_sample=None):
    """Path-traced radiance of the object alone; pixels missing it are zero.

    `material` optionally overrides the scene material with a packed (8,)
    vector (base rgb, metallic, roughness, emission rgb). `material_sample`
    pins the values used for sampling decisions and MIS pdfs; the adjoint
    harness uses it to keep the estimator smooth under finite differences
    (sampling is detached, so gradients never flow through it anyway).
    """
    env = as_envmap(lighting)
    smap = env if sample_map is None else sample_map
    cdf, pdfg = _tables(smap)
    cam_pos, cam_rot, half_w, half_h, rows, cols = _camera_arrays(scene, settings)
    out = np.zeros((rows, cols, 3))
    mat = scene.material.packed() if material is None else np.asarray(material, dtype=np.float64)
    msamp = mat if material_sample is None else np.asarray(material_sample, dtype=np.float64)
    k_foreground(
        np.uint64(settings.base_seed), settings.spp, settings.mis_rays, settings.max_depth,
        rows, cols, cam_pos, cam_rot, half_w, half_h,
        *_mesh_arrays(scene), mat, msamp, env.pixels, cdf, pdfg, out,
    )
    return out


def render_shadow_ratio(scene: Scene, lighting, settings: RenderSettings, sample_map=None, diagnostics=None):
    """Per-pixel ratio of plane radiance with / without the object; 1 off-plane."""
    env = as_envmap(lighting)
    smap = env if sample_map is None else sample_map
    cdf, pdfg = _tables(smap)
    cam_pos, cam_rot, half_w, half_h, rows, cols = _camera_arrays(scene, settings)
    beta = np.empty((rows, cols, 3))
    guards = np.zeros(N_CHUNKS, dtype=np.int64)
    mesh = _mesh_arrays(scene)
    k_shadow(
        np.uint64(settings.base_seed), settings.spp, settings.mis_rays,
        rows, cols, cam_pos, cam_rot, half_w, half_h,
        mesh[0], mesh[1], mesh[2], mesh[6], mesh[7], mesh[8], mesh[9],
        *_plane_arrays(scene), env.pixels, cdf, pdfg, beta, guards,
    )
    if diagnostics is not None:
        diagnostics["beta_denominator_guards"] = int(guards.sum())
    return beta


def visibility_mask(scene: Scene, settings: RenderSettings):
    """Fraction of primary samples per pixel that hit the object."""
    cam_pos, cam_rot, half_w, half_h, rows, cols = _camera_arrays(scene, settings)
    out = np.zeros((rows, cols))
    mesh = _mesh_arrays(scene)
    k_visibility(
        np.uint64(settings.base_seed), settings.spp, rows, cols,
        cam_pos, cam_rot, half_w, half_h,
        mesh[0], mesh[1], mesh[2], mesh[6], mesh[7], mesh[8], mesh[9], out,
    )
    return out


def render_foreground_vjp(scene: Scene, lighting, settings: RenderSettings, upstream,
                          sample_map=None, mat_gate=None, material=None, material_sample=None):
    """Replay adjoint: d<upstream, I_fg>/d(env pixels), d/d(packed material)."""
    env = as_envmap(lighting)
    smap = env if sample_map is None else sample_map
    cdf, pdfg = _tables(smap)
    cam_pos, cam_rot, half_w, half_h, rows, cols = _camera_arrays(scene, settings)
    up = np.ascontiguousarray(upstream, dtype=np.float64)
    if up.shape != (rows, cols, 3):
        raise ValueError("upstream must match the render resolution")
    if not np.all(np.isfinite(up)):
        raise ValueError("upstream gradient must be finite")
    H, W = env.height, env.width
    env_grad = np.zeros((N_CHUNKS, H * W * 3))
    mat_grad = np.zeros((N_CHUNKS, 8))
    mat = scene.material.packed() if material is None else np.asarray(material, dtype=np.float64)
    msamp = mat if material_sample is None else np.asarray(material_sample, dtype=np.float64)
    gate = np.ones(8) if mat_gate is None else np.asarray(mat_gate, dtype=np.float64)
    k_foreground_adj(
        np.uint64(settings.base_seed), settings.spp, settings.mis_rays, settings.max_depth,
        rows, cols, cam_pos, cam_rot, half_w, half_h,
        *_mesh_arrays(scene), mat, msamp, gate, env.pixels, cdf, pdfg,
        up, env_grad, mat_grad,
    )
    return env_grad.sum(axis=0).reshape(H, W, 3), mat_grad.sum(axis=0)


def render_shadow_ratio_vjp(scene: Scene, lighting, settings: RenderSettings, upstream, sample_map=None):
    """Replay adjoint of the shadow ratio w.r.t. the environment pixels."""
    env = as_envmap(lighting)
    smap = env if sample_map is None else sample_map
    cdf, pdfg = _tables(smap)
    cam_pos, cam_rot, half_w, half_h, rows, cols = _camera_arrays(scene, settings)
    up = np.ascontiguousarray(upstream, dtype=np.float64)
    if up.shape != (rows, cols, 3):
        raise ValueError("upstream must match the render resolution")
    if not np.all(np.isfinite(up)):
        raise ValueError("upstream gradient must be finite")
    H, W = env.height, env.width
    env_grad = np.zeros((N_CHUNKS, H * W * 3))
    mesh = _mesh_arrays(scene)
    k_shadow_adj(
        np.uint64(settings.base_seed), settings.spp, settings.mis_rays,
        rows, cols, cam_pos, cam_rot, half_w, half_h,
        mesh[0], mesh[1], mesh[2], mesh[6], mesh[7], mesh[8], mesh[9],
        *_plane_arrays(scene), env.pixels, cdf, pdfg, up, env_grad,
    )
    return env_grad.sum(axis=0).reshape(H, W, 3)
