import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from litevoxel.geometry import (CAMERA_FIELDS, Camera, camera_depth, camera_rays,
                                inter_ray_spacing, load_cameras, look_at, min_footprint,
                                pixel_ray, save_cameras)


def pose(R=np.eye(3), t=(0.0, 0.0, 0.0)):
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = t
    return m


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_principal_axis_ray():
    cam = Camera(5, 5, 7.0, 7.0, 2.5, 2.5)
    ray = pixel_ray(cam, 2, 2)
    np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(ray.origin, 0.0)


def test_translation_moves_origin_only():
    base = Camera(5, 5, 7.0, 7.0, 2.5, 2.5)
    moved = Camera(5, 5, 7.0, 7.0, 2.5, 2.5, pose(t=(-1.0, -2.0, -3.0)))
    a, b = pixel_ray(base, 1, 3), pixel_ray(moved, 1, 3)
    np.testing.assert_allclose(b.origin, [1, 2, 3])
    np.testing.assert_allclose(b.direction, a.direction)


def test_pixel_ray_matches_unprojection_oracle(rng):
    R = random_rotation(rng)
    t = rng.normal(size=3)
    cam = Camera(4, 4, 2.0, 2.0, 2.0, 2.0, pose(R, t))
    # invert K and the rigid pose independently with general matrix inverses
    K = np.array([[2.0, 0, 2.0], [0, 2.0, 2.0], [0, 0, 1]])
    c2w = np.linalg.inv(cam.world_to_camera)
    d_cam = np.linalg.inv(K) @ np.array([0.5, 0.5, 1.0])
    far = c2w @ np.append(d_cam, 1.0)
    origin = c2w @ np.array([0, 0, 0, 1.0])
    d = far[:3] - origin[:3]
    ray = pixel_ray(cam, 0, 0)
    np.testing.assert_allclose(ray.origin, origin[:3], atol=1e-12)
    np.testing.assert_allclose(ray.direction, d / np.linalg.norm(d), atol=1e-12)
    assert ray.pixel == (0, 0)


@pytest.mark.parametrize("xy", [(-1, 0), (4, 0), (0, 4), (0, -1)])
def test_pixel_ray_out_of_bounds(xy):
    with pytest.raises(ValueError):
        pixel_ray(Camera(4, 4, 2.0, 2.0, 2.0, 2.0), *xy)


def test_camera_rays_agree_with_pixel_ray(rng):
    cam = Camera(6, 5, 4.0, 5.0, 2.7, 2.2, pose(random_rotation(rng), rng.normal(size=3)))
    origin, dirs = camera_rays(cam)
    for y in range(cam.height):
        for x in range(cam.width):
            r = pixel_ray(cam, x, y)
            np.testing.assert_allclose(dirs[y, x], r.direction, atol=1e-14)
    np.testing.assert_allclose(origin, cam.center)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-9)


def test_camera_depth_examples():
    assert camera_depth(Camera(1, 1, 1, 1, 0, 0), (0, 0, 5)) == 5.0
    assert camera_depth(Camera(1, 1, 1, 1, 0, 0, pose(t=(0, 0, -2))), (0, 0, 5)) == 3.0


def test_camera_depth_matrix_oracle(rng):
    for _ in range(20):
        cam = Camera(2, 2, 1, 1, 1, 1, pose(random_rotation(rng), rng.normal(size=3)))
        p = rng.normal(size=(7, 3))
        hom = np.concatenate([p, np.ones((7, 1))], axis=1) @ cam.world_to_camera.T
        np.testing.assert_allclose(camera_depth(cam, p), hom[:, 2], atol=1e-12)


@given(st.floats(-np.pi, np.pi), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_depth_invariant_under_roll(theta, x, y, z):
    c, s = np.cos(theta), np.sin(theta)
    roll = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    base = random_rotation(np.random.default_rng(7))
    a = Camera(2, 2, 1, 1, 1, 1, pose(base, (0.1, 0.2, 0.3)))
    b = Camera(2, 2, 1, 1, 1, 1, pose(roll @ base, roll @ np.array([0.1, 0.2, 0.3])))
    assert camera_depth(a, (x, y, z)) == pytest.approx(camera_depth(b, (x, y, z)), abs=1e-12)


def test_inter_ray_spacing_examples():
    assert inter_ray_spacing(Camera(1, 1, 100, 100, 0, 0), 1.0) == pytest.approx(0.01)
    assert inter_ray_spacing(Camera(1, 1, 100, 100, 0, 0), 10.0) == pytest.approx(0.1)
    assert inter_ray_spacing(Camera(1, 1, 50, 100, 0, 0), 2.0) == pytest.approx(0.04)
    for z in (0.0, -1.0):
        with pytest.raises(ValueError):
            inter_ray_spacing(Camera(1, 1, 1, 1, 0, 0), z)


@settings(max_examples=50)
@given(st.floats(20, 400), st.floats(0.5, 50))
def test_spacing_matches_adjacent_rays(f, z):
    cam = Camera(64, 64, f, f, 32.0, 32.0)
    a, b = pixel_ray(cam, 32, 32), pixel_ray(cam, 33, 32)
    pa = a.origin + a.direction * z / a.direction[2]
    pb = b.origin + b.direction * z / b.direction[2]
    delta = inter_ray_spacing(cam, z)
    assert abs(np.linalg.norm(pb - pa) - delta) <= 0.05 * delta


def test_min_footprint_takes_closest_camera():
    near = Camera(4, 4, 10, 10, 2, 2, pose(t=(0, 0, 1)))
    far = Camera(4, 4, 10, 10, 2, 2, pose(t=(0, 0, 5)))
    behind = Camera(4, 4, 10, 10, 2, 2, pose(np.diag([1.0, -1.0, -1.0])))
    pts = np.array([[0, 0, 1.0], [0, 0, 3.0]])
    np.testing.assert_allclose(min_footprint([far, near, behind], pts), [0.2, 0.4])
    assert np.all(np.isinf(min_footprint([behind], pts)))


@pytest.mark.parametrize("kw", [dict(fx=0.0), dict(fy=-1.0), dict(width=0)])
def test_camera_invariants(kw):
    args = dict(width=2, height=2, fx=1.0, fy=1.0, cx=1.0, cy=1.0)
    args.update(kw)
    with pytest.raises(ValueError):
        Camera(**args)


def test_non_orthonormal_rotation_rejected():
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(2, 2, 1, 1, 1, 1, pose(np.diag([1.0, 1.0, 1.001])))


def test_look_at_points_camera_at_target():
    eye, target = np.array([3.0, 1.0, -2.0]), np.array([0.2, -0.1, 0.4])
    cam = Camera(9, 9, 10, 10, 4.5, 4.5, look_at(eye, target))
    np.testing.assert_allclose(cam.center, eye, atol=1e-12)
    ray = pixel_ray(cam, 4, 4)
    want = (target - eye) / np.linalg.norm(target - eye)
    np.testing.assert_allclose(ray.direction, want, atol=1e-12)


def test_cameras_json_round_trip(tmp_path, rng):
    cams = [Camera(8, 6, 5.5, 6.5, 4.1, 3.2, pose(random_rotation(rng), rng.normal(size=3)))
            for _ in range(3)]
    path = tmp_path / "cameras.json"
    save_cameras(cams, path)
    raw = json.loads(path.read_text())
    assert [sorted(d) for d in raw] == [sorted(CAMERA_FIELDS)] * 3
    assert all(len(d["world_to_camera"]) == 16 for d in raw)
    back = load_cameras(path)
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.world_to_camera, b.world_to_camera)
        assert (a.width, a.height, a.fx, a.fy, a.cx, a.cy) == (b.width, b.height, b.fx, b.fy,
                                                               b.cx, b.cy)


def test_cameras_json_missing_field(tmp_path):
    d = Camera(2, 2, 1, 1, 1, 1).to_dict()
    del d["fy"]
    (tmp_path / "c.json").write_text(json.dumps([d]))
    with pytest.raises(ValueError, match="fy"):
        load_cameras(tmp_path / "c.json")
