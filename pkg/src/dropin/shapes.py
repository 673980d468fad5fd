"""Procedural test geometry: quads, icospheres, disks, and OBJ export.

Used by the demos, the synthetic benchmark and the verification suites; not
part of the rendering core.
"""

import numpy as np

from .scenegraph import Camera, MaterialParams, Mesh, ProxyPlane, Scene


def quad_mesh(z=1.0, half=0.5, center=(0.0, 0.0)):
    cx, cy = center
    verts = np.array(
        [
            [cx - half, cy - half, z],
            [cx + half, cy - half, z],
            [cx + half, cy + half, z],
            [cx - half, cy + half, z],
        ]
    )
    return Mesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))


def icosphere(subdiv=1, radius=0.5, center=(0.0, 0.0, 1.0)):
    """Icosahedron subdivided and projected back to the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    cache = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in cache:
            m = verts[a] + verts[b]
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(m)
        return cache[key]

    for _ in range(subdiv):
        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = new
    v = np.asarray(verts)
    f = np.asarray(faces, dtype=np.int64)
    normals = v[f]  # unit sphere: normal == position
    return Mesh(v * radius + np.asarray(center), f, normals)


def disk_mesh(radius=1.0, center=(0.0, 0.0, 1.0), segments=48):
    """Fan-triangulated disk facing +z."""
    cx, cy, cz = center
    ang = 2.0 * np.pi * np.arange(segments) / segments
    rim = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang), np.full(segments, cz)], axis=1)
    verts = np.concatenate([[[cx, cy, cz]], rim])
    faces = np.array([[0, 1 + k, 1 + (k + 1) % segments] for k in range(segments)], dtype=np.int64)
    return Mesh(verts, faces)


def make_toy_scene(resolution=(64, 96), sphere=True, material=None, cam_kwargs=None):
    """Sphere (or quad) over the shadow-catcher plane, three-quarter view."""
    mesh = (
        icosphere(2, 0.45, (0.0, 0.0, 0.6))
        if sphere
        else quad_mesh(z=0.8, half=0.45)
    )
    kwargs = dict(
        position=(0.0, -2.8, 1.8),
        target=(0.0, 0.0, 0.45),
        up=(0.0, 0.0, 1.0),
        fov=np.radians(38.0),
        resolution=resolution,
    )
    if cam_kwargs:
        kwargs.update(cam_kwargs)
    cam = Camera.look_at(**kwargs)
    return Scene(
        object_mesh=mesh,
        material=material or MaterialParams(base_color=np.array([0.75, 0.6, 0.5]), roughness=0.6),
        plane=ProxyPlane(half_extent=np.array([8.0, 8.0])),
        camera=cam,
    )


def save_obj(path, mesh: Mesh, with_normals=True):
    """Write triangle soup OBJ (one normal per corner if requested)."""
    lines = []
    v0 = mesh.tri_v0
    v1 = v0 + mesh.tri_e1
    v2 = v0 + mesh.tri_e2
    for k in range(mesh.n_triangles):
        for v in (v0[k], v1[k], v2[k]):
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    if with_normals:
        for k in range(mesh.n_triangles):
            for n in (mesh.tri_n0[k], mesh.tri_n1[k], mesh.tri_n2[k]):
                lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    for k in range(mesh.n_triangles):
        a, b, c = 3 * k + 1, 3 * k + 2, 3 * k + 3
        if with_normals:
            lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
        else:
            lines.append(f"f {a} {b} {c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
