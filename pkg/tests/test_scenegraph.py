import json
import numpy as np
import pytest

from dropin.errors import SceneLoadError
from dropin.scenegraph import (
    Camera,
    MaterialParams,
    Mesh,
    Placement,
    ProxyPlane,
    Scene,
    load_scene,
    ray_intersect,
)
from dropin.shapes import icosphere, save_obj
from dropin.tracer import bvh_nearest

CUBE_OBJ = """\
v -0.5 -0.5 -0.5
v  0.5 -0.5 -0.5
v  0.5  0.5 -0.5
v -0.5  0.5 -0.5
v -0.5 -0.5  0.5
v  0.5 -0.5  0.5
v  0.5  0.5  0.5
v -0.5  0.5  0.5
f 1 2 3 4
f 5 8 7 6
f 1 5 6 2
f 2 6 7 3
f 3 7 8 4
f 4 8 5 1
"""


@pytest.fixture()
def cube_config(tmp_path):
    (tmp_path / "cube.obj").write_text(CUBE_OBJ)
    cfg = {"mesh": "cube.obj"}
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(cfg))
    return path


def test_minimal_config_loads_cube(cube_config):
    scene = load_scene(cube_config)
    assert scene.object_mesh.n_triangles == 12
    assert scene.has_object


def test_fov_zero_rejected(tmp_path):
    (tmp_path / "cube.obj").write_text(CUBE_OBJ)
    path = tmp_path / "scene.json"
    path.write_text(json.dumps({"mesh": "cube.obj", "camera": {"fov_deg": 0.0}}))
    with pytest.raises(SceneLoadError):
        load_scene(path)


def test_missing_mesh_file_errors(tmp_path):
    path = tmp_path / "scene.json"
    path.write_text(json.dumps({"mesh": "nope.obj"}))
    with pytest.raises(SceneLoadError, match="not found"):
        load_scene(path)


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "cube.obj").write_text(CUBE_OBJ)
    path = tmp_path / "scene.json"
    path.write_text(json.dumps({"mesh": "cube.obj", "lens_flare": True}))
    with pytest.raises(SceneLoadError, match="unknown"):
        load_scene(path)
    path.write_text(json.dumps({"mesh": "cube.obj", "camera": {"zoom": 2}}))
    with pytest.raises(SceneLoadError, match="unknown"):
        load_scene(path)


def test_zero_scale_rejected(tmp_path):
    (tmp_path / "cube.obj").write_text(CUBE_OBJ)
    path = tmp_path / "scene.json"
    path.write_text(json.dumps({"mesh": "cube.obj", "placement": {"scale": 0.0}}))
    with pytest.raises(SceneLoadError, match="invertible"):
        load_scene(path)


def test_malformed_obj_errors(tmp_path):
    (tmp_path / "bad.obj").write_text("v 0 0\nf 1 2 zzz\n")
    path = tmp_path / "scene.json"
    path.write_text(json.dumps({"mesh": "bad.obj"}))
    with pytest.raises(SceneLoadError, match="malformed|no usable"):
        load_scene(path)


def test_null_mesh_allowed(tmp_path):
    path = tmp_path / "scene.json"
    path.write_text(json.dumps({"mesh": None}))
    scene = load_scene(path)
    assert not scene.has_object


def test_placement_applied(tmp_path):
    (tmp_path / "cube.obj").write_text(CUBE_OBJ)
    path = tmp_path / "scene.json"
    path.write_text(
        json.dumps(
            {
                "mesh": "cube.obj",
                "placement": {"translation": [0, 0, 2.0], "scale": 2.0},
            }
        )
    )
    scene = load_scene(path)
    lo, hi = scene.object_bounds()
    assert np.allclose(lo, [-1, -1, 1])
    assert np.allclose(hi, [1, 1, 3])


def test_camera_invariants():
    with pytest.raises(ValueError):
        Camera(np.zeros(3), np.eye(3) * 2.0, np.radians(45), (4, 4))
    with pytest.raises(ValueError):
        Camera(np.zeros(3), np.eye(3), 0.0, (4, 4))


def test_material_ranges():
    with pytest.raises(ValueError):
        MaterialParams(roughness=0.0)
    with pytest.raises(ValueError):
        MaterialParams(metallic=1.5)
    with pytest.raises(ValueError):
        MaterialParams(base_color=np.array([1.2, 0, 0]))


def test_plane_normal_unit():
    with pytest.raises(ValueError):
        ProxyPlane(normal=np.array([0.0, 0.0, 2.0]))


def test_ray_hits_plane_from_above(small_scene):
    hit = ray_intersect(small_scene, [0.3, 0.2, 5.0], [0, 0, -1.0], subset="plane")
    assert hit is not None
    assert hit.material_tag == "plane"
    assert np.allclose(hit.normal, [0, 0, 1])
    assert np.isclose(hit.distance, 5.0)


def test_ray_parallel_to_plane_misses():
    scene = Scene(None, MaterialParams(), ProxyPlane(), Camera.look_at((0, -3, 1), (0, 0, 1)))
    assert ray_intersect(scene, [0, 0, 1.0], [1.0, 0, 0], subset="object+plane") is None


def test_bvh_matches_brute_force(rng):
    mesh = icosphere(2, 0.7, (0.1, -0.2, 0.9))  # 320 triangles
    scene = Scene(mesh, MaterialParams(), ProxyPlane(), Camera.look_at((0, -3, 1), (0, 0, 1)))
    center = np.array([0.1, -0.2, 0.9])
    hits = 0
    for k in range(10_000):
        o = rng.normal(0, 2.0, 3) + [0, 0, 1.0]
        if k % 2 == 0:  # aim near the sphere so intersections are exercised
            d = center + rng.normal(0, 0.5, 3) - o
        else:
            d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        idx, t, u, v = bvh_nearest(mesh, o, d)
        ref = ray_intersect(scene, o, d, subset="object")
        if ref is None:
            assert idx < 0
        else:
            hits += 1
            assert idx >= 0
            assert np.isclose(t, ref.distance, rtol=1e-9)
    assert hits > 3000  # the test actually exercised intersections


def test_mesh_filters_degenerate_triangles():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.5, 0.5, 0]])
    faces = np.array([[0, 1, 2], [0, 1, 1], [1, 1, 1]])
    mesh = Mesh(verts, faces)
    assert mesh.n_triangles == 1


def test_obj_with_normals_round_trip(tmp_path, rng):
    mesh = icosphere(1, 0.5, (0, 0, 1))
    save_obj(tmp_path / "ball.obj", mesh)
    cfg = tmp_path / "scene.json"
    cfg.write_text(json.dumps({"mesh": "ball.obj"}))
    loaded = load_scene(cfg)
    assert loaded.object_mesh.n_triangles == mesh.n_triangles
    # shading normals survive export/import (BVH build reorders triangles,
    # so compare via intersections instead of raw arrays)
    scene_a = Scene(mesh, MaterialParams(), ProxyPlane(), Camera.look_at((0, -3, 1), (0, 0, 1)))
    for _ in range(100):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        o = np.array([0, 0, 1.0]) - 3.0 * d
        ha = ray_intersect(scene_a, o, d, subset="object")
        hb = ray_intersect(loaded, o, d, subset="object")
        assert (ha is None) == (hb is None)
        if ha is not None:
            assert np.allclose(ha.normal, hb.normal, atol=1e-6)
            assert np.isclose(ha.distance, hb.distance, rtol=1e-9)


def test_placement_rotation_invertible():
    with pytest.raises(SceneLoadError):
        Placement(scale=0.0)
