"""Scene description: inserted object mesh, PBR material, proxy shadow-catcher
plane, pinhole camera. Meshes come from Wavefront OBJ and carry a flat-array
BVH so the tracer kernels can intersect them without touching Python objects.

The scene is immutable after load; intersection queries are read-only.
"""

import json
import numpy as np
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SceneLoadError


def _vec3(x, name):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise SceneLoadError(f"{name} must be a 3-vector")
    return v


@dataclass(frozen=True)
class Camera:
    position: np.ndarray          # meters
    rotation: np.ndarray          # 3x3 camera-to-world; camera looks along -z
    fov: float                    # vertical field of view, radians
    resolution: tuple             # (rows, cols)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation must be orthonormal")
        if not 0.0 < self.fov < np.pi:
            raise ValueError("fov must lie in (0, pi)")
        object.__setattr__(self, "position", _vec3(self.position, "camera position"))
        object.__setattr__(self, "rotation", R)

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), fov=np.radians(45.0), resolution=(256, 384)):
        position = np.asarray(position, dtype=np.float64)
        f = np.asarray(target, dtype=np.float64) - position
        nf = np.linalg.norm(f)
        if nf < 1e-12:
            raise ValueError("camera target coincides with position")
        f = f / nf
        s = np.cross(f, np.asarray(up, dtype=np.float64))
        ns = np.linalg.norm(s)
        if ns < 1e-12:
            raise ValueError("camera up is parallel to the view direction")
        s = s / ns
        u = np.cross(s, f)
        R = np.stack([s, u, -f], axis=1)
        return cls(position, R, float(fov), tuple(resolution))

    def half_extents(self):
        rows, cols = self.resolution
        half_h = np.tan(0.5 * self.fov)
        return half_h * cols / rows, half_h

    def ray_direction(self, i, j, u=0.5, v=0.5):
        """World-space direction through pixel (i, j) at subpixel (u, v)."""
        rows, cols = self.resolution
        half_w, half_h = self.half_extents()
        x = (2.0 * (j + u) / cols - 1.0) * half_w
        y = (1.0 - 2.0 * (i + v) / rows) * half_h
        d = self.rotation @ np.array([x, y, -1.0])
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class MaterialParams:
    """Lambertian/GGX blend; ranges enforced on read when optimized."""

    base_color: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.8, 0.8]))
    metallic: float = 0.0
    roughness: float = 0.5
    emission: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        bc = _vec3(self.base_color, "base_color")
        em = _vec3(self.emission, "emission")
        if np.any(bc < 0) or np.any(bc > 1):
            raise ValueError("base_color must lie in [0, 1]^3")
        if not 0.0 <= self.metallic <= 1.0:
            raise ValueError("metallic must lie in [0, 1]")
        if not 0.02 <= self.roughness <= 1.0:
            raise ValueError("roughness must lie in [0.02, 1]")
        if np.any(em < 0):
            raise ValueError("emission must be nonnegative")
        object.__setattr__(self, "base_color", bc)
        object.__setattr__(self, "emission", em)

    def packed(self):
        """(8,) layout used by the tracer: base(3), metallic, roughness, emission(3)."""
        return np.concatenate([self.base_color, [self.metallic, self.roughness], self.emission])


def clamp_packed_material(raw):
    """Clamp a raw (8,) material vector on read; returns (values, gradient gate)."""
    raw = np.asarray(raw, dtype=np.float64).reshape(8)
    lo = np.array([0, 0, 0, 0, 0.02, 0, 0, 0], dtype=np.float64)
    hi = np.array([1, 1, 1, 1, 1, np.inf, np.inf, np.inf], dtype=np.float64)
    vals = np.clip(raw, lo, hi)
    gate = ((raw > lo) & (raw < hi)).astype(np.float64)
    return vals, gate


@dataclass(frozen=True)
class ProxyPlane:
    """Finite shadow-catcher rectangle."""

    point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    half_extent: np.ndarray = field(default_factory=lambda: np.array([10.0, 10.0]))

    def __post_init__(self):
        n = _vec3(self.normal, "plane normal")
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise ValueError("plane normal must be unit length")
        he = np.asarray(self.half_extent, dtype=np.float64).reshape(-1)
        if he.shape == (1,):
            he = np.repeat(he, 2)
        if he.shape != (2,) or np.any(he <= 0):
            raise ValueError("half_extent must be positive (scalar or pair)")
        object.__setattr__(self, "point", _vec3(self.point, "plane point"))
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "half_extent", he)

    def basis(self):
        n = self.normal
        a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(n, a)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return u, v


# ---------------------------------------------------------------------------
# meshes


class Mesh:
    """Triangle mesh with per-corner shading normals and a median-split BVH."""

    LEAF_SIZE = 4

    def __init__(self, vertices, faces, corner_normals=None):
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise SceneLoadError("face index out of range")
        p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        area2 = np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
        keep = area2 > 1e-12
        f = f[keep]
        self.vertices = v
        self.faces = f
        p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        self.tri_v0 = np.ascontiguousarray(p0)
        self.tri_e1 = np.ascontiguousarray(p1 - p0)
        self.tri_e2 = np.ascontiguousarray(p2 - p0)
        gn = np.cross(self.tri_e1, self.tri_e2)
        gn /= np.linalg.norm(gn, axis=1, keepdims=True)
        if corner_normals is not None:
            cn = np.asarray(corner_normals, dtype=np.float64)[keep]
            cn = cn / np.maximum(np.linalg.norm(cn, axis=2, keepdims=True), 1e-12)
        else:
            cn = np.repeat(gn[:, None, :], 3, axis=1)
        self.tri_n0 = np.ascontiguousarray(cn[:, 0])
        self.tri_n1 = np.ascontiguousarray(cn[:, 1])
        self.tri_n2 = np.ascontiguousarray(cn[:, 2])
        self._build_bvh()

    @property
    def n_triangles(self):
        return self.faces.shape[0]

    def _build_bvh(self):
        n = self.n_triangles
        if n == 0:
            self.bvh_min = np.zeros((0, 3))
            self.bvh_max = np.zeros((0, 3))
            self.bvh_left = np.zeros(0, dtype=np.int64)
            self.bvh_right = np.zeros(0, dtype=np.int64)
            return
        v1 = self.tri_v0 + self.tri_e1
        v2 = self.tri_v0 + self.tri_e2
        lo = np.minimum(np.minimum(self.tri_v0, v1), v2)
        hi = np.maximum(np.maximum(self.tri_v0, v1), v2)
        centroid = 0.5 * (lo + hi)

        order = np.arange(n)
        nodes_min, nodes_max, nodes_l, nodes_r = [], [], [], []

        def build(idx):
            node = len(nodes_min)
            nodes_min.append(lo[idx].min(axis=0))
            nodes_max.append(hi[idx].max(axis=0))
            nodes_l.append(0)
            nodes_r.append(0)
            if len(idx) <= self.LEAF_SIZE:
                start = build.cursor
                order[start : start + len(idx)] = idx
                build.cursor += len(idx)
                nodes_l[node] = -(start + 1)
                nodes_r[node] = len(idx)
                return node
            c = centroid[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            mid = len(idx) // 2
            part = idx[np.argsort(c[:, axis], kind="stable")]
            nodes_l[node] = build(part[:mid])
            nodes_r[node] = build(part[mid:])
            return node

        build.cursor = 0
        build(order.copy())
        self.tri_v0 = np.ascontiguousarray(self.tri_v0[order])
        self.tri_e1 = np.ascontiguousarray(self.tri_e1[order])
        self.tri_e2 = np.ascontiguousarray(self.tri_e2[order])
        self.tri_n0 = np.ascontiguousarray(self.tri_n0[order])
        self.tri_n1 = np.ascontiguousarray(self.tri_n1[order])
        self.tri_n2 = np.ascontiguousarray(self.tri_n2[order])
        self.bvh_min = np.ascontiguousarray(np.array(nodes_min))
        self.bvh_max = np.ascontiguousarray(np.array(nodes_max))
        self.bvh_left = np.array(nodes_l, dtype=np.int64)
        self.bvh_right = np.array(nodes_r, dtype=np.int64)


def load_obj(path):
    """Wavefront OBJ: v / vn / f records, polygons fan-triangulated."""
    path = Path(path)
    if not path.exists():
        raise SceneLoadError(f"mesh file not found: {path}")
    verts, normals, faces, face_normals = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    corner_v, corner_n = [], []
                    for tok in parts[1:]:
                        fields = tok.split("/")
                        vi = int(fields[0])
                        ni = int(fields[2]) if len(fields) >= 3 and fields[2] else 0
                        corner_v.append(vi - 1 if vi > 0 else len(verts) + vi)
                        corner_n.append(ni - 1 if ni > 0 else None if ni == 0 else len(normals) + ni)
                    if len(corner_v) < 3:
                        raise ValueError("face with fewer than 3 vertices")
                    for a in range(1, len(corner_v) - 1):
                        faces.append([corner_v[0], corner_v[a], corner_v[a + 1]])
                        face_normals.append([corner_n[0], corner_n[a], corner_n[a + 1]])
            except (ValueError, IndexError) as exc:
                raise SceneLoadError(f"malformed OBJ at {path}:{lineno}: {exc}") from exc
    if not verts or not faces:
        raise SceneLoadError(f"OBJ has no usable geometry: {path}")
    verts = np.asarray(verts, dtype=np.float64)
    faces_arr = np.asarray(faces, dtype=np.int64)
    corner_normals = None
    if normals and all(all(n is not None for n in fn) for fn in face_normals):
        nrm = np.asarray(normals, dtype=np.float64)
        idx = np.asarray(face_normals, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= len(nrm):
            raise SceneLoadError(f"normal index out of range in {path}")
        corner_normals = nrm[idx]
    return verts, faces_arr, corner_normals


def _euler_xyz(deg):
    rx, ry, rz = np.radians(np.asarray(deg, dtype=np.float64))
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True)
class Placement:
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation_euler_xyz_deg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        if self.scale == 0.0 or not np.isfinite(self.scale):
            raise SceneLoadError("placement scale must be nonzero (transform not invertible)")
        object.__setattr__(self, "translation", _vec3(self.translation, "translation"))
        object.__setattr__(
            self, "rotation_euler_xyz_deg", _vec3(self.rotation_euler_xyz_deg, "rotation")
        )

    def apply(self, vertices, normals=None):
        R = _euler_xyz(self.rotation_euler_xyz_deg)
        out_v = vertices @ (self.scale * R).T + self.translation
        out_n = None if normals is None else normals @ R.T
        return out_v, out_n


@dataclass(frozen=True)
class Scene:
    object_mesh: Mesh | None
    material: MaterialParams
    plane: ProxyPlane
    camera: Camera
    background: np.ndarray | None = None  # 8-bit sRGB rows x cols x 3
    background_path: str | None = None

    @property
    def has_object(self):
        return self.object_mesh is not None and self.object_mesh.n_triangles > 0

    def object_bounds(self):
        if not self.has_object:
            return None
        v0 = self.object_mesh.tri_v0
        v1 = v0 + self.object_mesh.tri_e1
        v2 = v0 + self.object_mesh.tri_e2
        allv = np.concatenate([v0, v1, v2])
        return allv.min(axis=0), allv.max(axis=0)


_TOP_KEYS = {"mesh", "placement", "material", "plane", "camera", "background"}
_GROUP_KEYS = {
    "placement": {"translation", "rotation_euler_xyz_deg", "scale"},
    "material": {"base_color", "metallic", "roughness", "emission"},
    "plane": {"point", "normal", "half_extent"},
    "camera": {"position", "look_at", "up", "fov_deg", "resolution"},
    "background": {"path"},
}


def _check_keys(d, allowed, where):
    unknown = set(d) - allowed
    if unknown:
        raise SceneLoadError(f"unknown config key(s) in {where}: {sorted(unknown)}")


def load_scene(config_path):
    """Build a Scene from a JSON config; unknown keys are rejected."""
    config_path = Path(config_path)
    if not config_path.exists():
        raise SceneLoadError(f"scene config not found: {config_path}")
    try:
        cfg = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneLoadError(f"invalid JSON in {config_path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise SceneLoadError("scene config must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "scene config")
    for group, allowed in _GROUP_KEYS.items():
        if group in cfg and cfg[group] is not None:
            if not isinstance(cfg[group], dict):
                raise SceneLoadError(f"'{group}' must be an object")
            _check_keys(cfg[group], allowed, f"'{group}'")

    if "mesh" not in cfg:
        raise SceneLoadError("scene config requires a 'mesh' entry (may be null)")

    base = config_path.parent
    try:
        placement = Placement(**cfg.get("placement", {}) or {})
        material = MaterialParams(
            **{
                k: (np.asarray(v, dtype=np.float64) if isinstance(v, list) else v)
                for k, v in (cfg.get("material", {}) or {}).items()
            }
        )
        pl = cfg.get("plane", {}) or {}
        plane = ProxyPlane(
            point=pl.get("point", (0.0, 0.0, 0.0)),
            normal=pl.get("normal", (0.0, 0.0, 1.0)),
            half_extent=np.atleast_1d(np.asarray(pl.get("half_extent", 10.0), dtype=np.float64)),
        )
        cam_cfg = cfg.get("camera", {}) or {}
        fov_deg = float(cam_cfg.get("fov_deg", 45.0))
        camera = Camera.look_at(
            position=cam_cfg.get("position", (0.0, -4.0, 1.5)),
            target=cam_cfg.get("look_at", (0.0, 0.0, 0.5)),
            up=cam_cfg.get("up", (0.0, 0.0, 1.0)),
            fov=np.radians(fov_deg),
            resolution=tuple(cam_cfg.get("resolution", (256, 384))),
        )
    except ValueError as exc:
        raise SceneLoadError(str(exc)) from exc

    mesh = None
    if cfg["mesh"] is not None:
        verts, faces, cnorm = load_obj(base / cfg["mesh"])
        verts, cnorm = placement.apply(verts, cnorm)
        mesh = Mesh(verts, faces, cnorm)

    background = None
    bg_path = None
    bg_cfg = cfg.get("background")
    if bg_cfg and bg_cfg.get("path"):
        from .imageio import read_png

        bg_path = str(base / bg_cfg["path"])
        background = read_png(bg_path)

    return Scene(
        object_mesh=mesh,
        material=material,
        plane=plane,
        camera=camera,
        background=background,
        background_path=bg_path,
    )


# ---------------------------------------------------------------------------
# reference-path intersection (tests and tools; kernels use tracer.py)


@dataclass(frozen=True)
class Hit:
    position: np.ndarray
    normal: np.ndarray
    material_tag: str
    distance: float


def _intersect_mesh_brute(mesh: Mesh, o, d, t_min=1e-7):
    best = (np.inf, -1, 0.0, 0.0)
    for t_idx in range(mesh.n_triangles):
        v0 = mesh.tri_v0[t_idx]
        e1 = mesh.tri_e1[t_idx]
        e2 = mesh.tri_e2[t_idx]
        p = np.cross(d, e2)
        det = e1 @ p
        if abs(det) < 1e-12:
            continue
        inv = 1.0 / det
        s = o - v0
        u = (s @ p) * inv
        if u < 0.0 or u > 1.0:
            continue
        q = np.cross(s, e1)
        v = (d @ q) * inv
        if v < 0.0 or u + v > 1.0:
            continue
        t = (e2 @ q) * inv
        if t_min < t < best[0]:
            best = (t, t_idx, u, v)
    return best


def ray_intersect(scene: Scene, origin, direction, subset="object+plane"):
    """Nearest hit within the subset, or None. Reference implementation."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("ray direction must be unit length")
    if subset not in ("object", "plane", "object+plane"):
        raise ValueError("subset must be object | plane | object+plane")

    best_t, tag, normal = np.inf, None, None
    if "object" in subset and scene.has_object:
        t, idx, u, v = _intersect_mesh_brute(scene.object_mesh, o, d)
        if idx >= 0:
            m = scene.object_mesh
            n = (1.0 - u - v) * m.tri_n0[idx] + u * m.tri_n1[idx] + v * m.tri_n2[idx]
            n /= np.linalg.norm(n)
            best_t, tag, normal = t, "object", n
    if "plane" in subset:
        pn = scene.plane.normal
        denom = d @ pn
        if abs(denom) > 1e-12:
            t = ((scene.plane.point - o) @ pn) / denom
            if 1e-7 < t < best_t:
                u_ax, v_ax = scene.plane.basis()
                rel = o + t * d - scene.plane.point
                if abs(rel @ u_ax) <= scene.plane.half_extent[0] and abs(rel @ v_ax) <= scene.plane.half_extent[1]:
                    best_t, tag, normal = t, "plane", pn.copy()
    if tag is None:
        return None
    if normal @ d > 0:
        normal = -normal
    return Hit(o + best_t * d, normal, tag, float(best_t))
