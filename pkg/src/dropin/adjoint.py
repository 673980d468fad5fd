"""Gradient exchange: the flat parameter vector with named segments, the
render-level VJP that chains tracer adjoints through the lighting bake, and
the finite-difference harness used by gradcheck.

Gradients accumulate in float64 throughout. No autodiff tape exists anywhere
in this package: every operation exposes a hand-derived VJP and the renderer
replays its forward sample set (see tracer.py).
"""

import numpy as np
from dataclasses import dataclass, field

from .lightfield import SgLightingParams, envmap_bake, envmap_bake_vjp
from .scenegraph import clamp_packed_material
from .tracer import render_foreground_vjp, render_shadow_ratio_vjp


class ParamVector:
    """Contiguous float64 storage with named, disjoint, covering segments."""

    def __init__(self, segments, values=None):
        # segments: ordered dict/list of (name, length)
        if hasattr(segments, "items"):
            segments = list(segments.items())
        self.segments = {}
        off = 0
        for name, length in segments:
            if length < 0:
                raise ValueError("segment length must be nonnegative")
            self.segments[name] = (off, int(length))
            off += int(length)
        self.size = off
        self.values = np.zeros(off) if values is None else np.asarray(values, dtype=np.float64).copy()
        if self.values.shape != (off,):
            raise ValueError("values do not match segment layout")

    def get(self, name):
        off, ln = self.segments[name]
        return self.values[off : off + ln]

    def set(self, name, arr):
        off, ln = self.segments[name]
        a = np.asarray(arr, dtype=np.float64).reshape(-1)
        if a.shape != (ln,):
            raise ValueError(f"segment {name} expects length {ln}")
        self.values[off : off + ln] = a

    def add(self, name, arr):
        off, ln = self.segments[name]
        self.values[off : off + ln] += np.asarray(arr, dtype=np.float64).reshape(ln)

    def zeros_like(self):
        return ParamVector(list((n, l) for n, (_, l) in self.segments.items()))

    def copy(self):
        return ParamVector(list((n, l) for n, (_, l) in self.segments.items()), self.values)

    def unflatten(self):
        return {name: self.get(name).copy() for name in self.segments}

    @classmethod
    def flatten(cls, parts, segments=None):
        if segments is None:
            segments = [(name, np.asarray(v).size) for name, v in parts.items()]
        pv = cls(segments)
        for name, v in parts.items():
            pv.set(name, np.asarray(v).reshape(-1))
        return pv

    def __len__(self):
        return self.size


def render_vjp(scene, lighting: SgLightingParams, settings, upstream_fg=None,
               upstream_beta=None, sample_map=None, material_raw=None, env_hw=(128, 256)):
    """Image-space gradients -> {sg, material, emission} ParamVector.

    Replays the forward sample set of the given settings/seed; the caller must
    pass the same settings as the forward pass (a mismatch is undetectable).
    Covers the foreground path (upstream_fg) and the shadow-ratio path
    (upstream_beta); both may be given at once against the same lighting.
    """
    H, W = env_hw
    env = envmap_bake(lighting, H, W)
    env_grad = np.zeros((H, W, 3))
    mat_grad = np.zeros(8)
    if material_raw is not None:
        mat_vals, mat_gate = clamp_packed_material(material_raw)
    else:
        mat_vals, mat_gate = None, np.ones(8)
    if upstream_fg is not None:
        g_env, g_mat = render_foreground_vjp(
            scene, env, settings, upstream_fg, sample_map=sample_map,
            mat_gate=mat_gate, material=mat_vals,
        )
        env_grad += g_env
        mat_grad += g_mat
    if upstream_beta is not None:
        env_grad += render_shadow_ratio_vjp(scene, env, settings, upstream_beta, sample_map=sample_map)
    sg_grad = envmap_bake_vjp(lighting, H, W, env_grad)
    return ParamVector.flatten(
        {
            "sg": sg_grad.ravel(),
            "material": mat_grad[:5],
            "emission": mat_grad[5:],
        }
    )


@dataclass
class FdReport:
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    failures: list = field(default_factory=list)  # (index, analytic, numeric, rel_err)
    passed: bool = True

    def __str__(self):
        lines = [
            f"coordinates checked : {self.n_checked}",
            f"max relative error  : {self.max_rel_error:.3e}",
            f"mean relative error : {self.mean_rel_error:.3e}",
            f"result              : {'PASS' if self.passed else 'FAIL'}",
        ]
        for idx, a, n, r in self.failures[:20]:
            lines.append(f"  coord {idx}: analytic={a:.6e} numeric={n:.6e} rel={r:.3e}")
        if len(self.failures) > 20:
            lines.append(f"  ... {len(self.failures) - 20} more")
        return "\n".join(lines)


def finite_diff_check(loss_fn, params, h=1e-4, tolerance=1e-4, coords=None):
    """Central differences against the analytic gradient of loss_fn.

    loss_fn(params) must be deterministic and return (loss, grad). The
    relative error uses a scale floor so coordinates with near-zero gradient
    on both sides do not produce spurious failures.
    """
    params = np.asarray(params, dtype=np.float64)
    _, grad = loss_fn(params)
    grad = np.asarray(grad, dtype=np.float64)
    if coords is None:
        coords = range(params.size)
    scale = max(float(np.max(np.abs(grad))), 1e-12)
    errs = []
    failures = []
    for idx in coords:
        p = params.copy()
        p[idx] += h
        lp, _ = loss_fn(p)
        p[idx] -= 2 * h
        lm, _ = loss_fn(p)
        numeric = (lp - lm) / (2 * h)
        denom = max(abs(grad[idx]), abs(numeric), 1e-6 * scale, 1e-12)
        rel = abs(grad[idx] - numeric) / denom
        errs.append(rel)
        if rel > tolerance:
            failures.append((int(idx), float(grad[idx]), float(numeric), float(rel)))
    errs = np.asarray(errs)
    return FdReport(
        max_rel_error=float(errs.max()) if errs.size else 0.0,
        mean_rel_error=float(errs.mean()) if errs.size else 0.0,
        n_checked=int(errs.size),
        failures=failures,
        passed=not failures,
    )
