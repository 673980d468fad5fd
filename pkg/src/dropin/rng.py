"""Counter-based random number generation (Philox4x32-10).

Every random decision in the renderer is keyed by
(base_seed, pixel_index, sample_index, bounce, purpose), so the same draw can
be regenerated at any time: the adjoint pass replays the exact forward sample
set, and results are independent of thread scheduling by construction.

The implementation follows the Philox4x32-10 reference (Salmon et al.,
"Parallel random numbers: as easy as 1, 2, 3") and matches its published
known-answer vectors.
"""

import numpy as np
from numba import njit

# purpose tags for the renderer's independent streams
PRIMARY = 1
NEE = 2
BSDF_MIS = 3
CONTINUATION = 4
SHADOW_NEE = 5
SHADOW_BSDF = 6
CROP = 7
TIMESTEP = 8
NOISE = 9

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_LO32 = np.uint64(0xFFFFFFFF)


@njit(cache=True, inline="always")
def _philox4(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * np.uint64(c0)
        p1 = _M1 * np.uint64(c2)
        hi0 = np.uint32(p0 >> np.uint64(32))
        lo0 = np.uint32(p0 & _LO32)
        hi1 = np.uint32(p1 >> np.uint64(32))
        lo1 = np.uint32(p1 & _LO32)
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = np.uint32(k0 + _W0)
        k1 = np.uint32(k1 + _W1)
    return c0, c1, c2, c3


@njit(cache=True, inline="always")
def _u01_block(pixel, sample, bounce_purpose, draw, k0, k1):
    """One Philox block -> two float64 uniforms in [0, 1)."""
    x0, x1, x2, x3 = _philox4(
        np.uint32(pixel), np.uint32(sample), np.uint32(bounce_purpose), np.uint32(draw), k0, k1
    )
    a = (np.uint64(x0) << np.uint64(32)) | np.uint64(x1)
    b = (np.uint64(x2) << np.uint64(32)) | np.uint64(x3)
    u = np.float64(a >> np.uint64(11)) * (2.0**-53)
    v = np.float64(b >> np.uint64(11)) * (2.0**-53)
    return u, v


@njit(cache=True, inline="always")
def _key(base_seed):
    s = np.uint64(base_seed)
    return np.uint32(s & _LO32), np.uint32(s >> np.uint64(32))


@njit(cache=True, inline="always")
def _bp(bounce, purpose):
    # purpose in the high byte, bounce/ray packed below
    return np.uint32((np.uint32(purpose) << np.uint32(24)) | (np.uint32(bounce) & np.uint32(0xFFFFFF)))


@njit(cache=True, inline="always")
def _u2(base_seed, pixel, sample, bounce, purpose):
    k0, k1 = _key(base_seed)
    return _u01_block(pixel, sample, _bp(bounce, purpose), 0, k0, k1)


@njit(cache=True, inline="always")
def _u4(base_seed, pixel, sample, bounce, purpose):
    k0, k1 = _key(base_seed)
    bp = _bp(bounce, purpose)
    u0, u1 = _u01_block(pixel, sample, bp, 0, k0, k1)
    u2, u3 = _u01_block(pixel, sample, bp, 1, k0, k1)
    return u0, u1, u2, u3


@njit(cache=True)
def _fill_stream(out, base_seed, pixel, sample, bounce, purpose):
    k0, k1 = _key(base_seed)
    bp = _bp(bounce, purpose)
    n = out.shape[0]
    for d in range((n + 1) // 2):
        u, v = _u01_block(pixel, sample, bp, d, k0, k1)
        out[2 * d] = u
        if 2 * d + 1 < n:
            out[2 * d + 1] = v


def rng_stream(base_seed, pixel_index, sample_index, bounce, purpose_tag, n=2):
    """n uniform float64 in [0, 1) for the given counter key.

    Same key -> same sequence, on every platform and thread schedule.
    """
    out = np.empty(int(n), dtype=np.float64)
    _fill_stream(
        out,
        np.uint64(base_seed),
        np.uint32(pixel_index),
        np.uint32(sample_index),
        np.uint32(bounce),
        np.uint32(purpose_tag),
    )
    return out


def rng_normal(base_seed, pixel_index, sample_index, bounce, purpose_tag, n=1):
    """Standard normals via Box-Muller on the uniform stream."""
    m = int(n)
    u = rng_stream(base_seed, pixel_index, sample_index, bounce, purpose_tag, 2 * m)
    r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
    return r * np.cos(2.0 * np.pi * u[1::2])


def derive_seed(base_seed, *fields):
    """Stable 64-bit sub-seed from a base seed and integer fields."""
    s = np.uint64(base_seed)
    for f in fields:
        u, v = _u2(s, np.uint32(np.uint64(f) & _LO32), np.uint32(np.uint64(f) >> np.uint64(32)), 0, 0)
        s = np.uint64(int(u * 2**32)) << np.uint64(32) | np.uint64(int(v * 2**32))
    return int(s)
