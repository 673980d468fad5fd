"""Differentiable object insertion for single images.

Recovers environment lighting (spherical Gaussians) and tone-mapping curves
by gradient descent against a pluggable guidance signal, then composites a
virtual object with matching shading and cast shadows.
"""

from .errors import (
    DropinError,
    SceneLoadError,
    DegenerateDistributionError,
    GuidanceUnavailableError,
    NumericalFailureError,
)
from .lightfield import (
    SgLobe,
    SgLightingParams,
    EnvironmentMap,
    sg_eval,
    envmap_bake,
    envmap_sample,
    envmap_pdf,
    normalized_luminance,
    consistency_loss,
    cauchy_reg,
    fuse,
    blend_scheduled,
    direction_from_pixel,
    init_lighting,
)
from .scenegraph import (
    Camera,
    Mesh,
    MaterialParams,
    ProxyPlane,
    Scene,
    Placement,
    load_scene,
    ray_intersect,
)
from .bsdf import bsdf_eval, bsdf_sample, bsdf_pdf
from .tracer import (
    RenderSettings,
    RenderOutputs,
    render_foreground,
    render_shadow_ratio,
    visibility_mask,
    composite,
    mis_weight,
)
from .tonemap import (
    RqSpline,
    ToneParams,
    reinhard,
    apply_fg_tone,
    apply_shadow_tone,
    srgb_decode,
    srgb_encode,
)
from .rng import rng_stream

__version__ = "0.1.0"
