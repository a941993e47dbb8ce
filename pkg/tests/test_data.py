import json

import numpy as np
import pytest

from sparsesplat.data import (Dataset, View, camera_from_blender, camera_to_blender, load_blender, read_depth,
                              read_png, save_blender, write_depth, write_png)
from sparsesplat.errors import DataFormatError
from sparsesplat.geometry import look_at, project_point
from sparsesplat.synth import Primitive, SceneSpec, ray_trace, render_dataset, synth


def test_focal_length_from_angle():
    cam = camera_from_blender(np.eye(4), 200, 100, np.deg2rad(90))
    assert cam.fx == pytest.approx(100.0) and cam.fy == pytest.approx(100.0)
    assert (cam.cx, cam.cy) == (99.5, 49.5)


def test_blender_axes():
    # Blender cameras look down their local -z with +y up.
    c2w = np.eye(4)
    c2w[:3, 3] = (0, 0, 5)
    cam = camera_from_blender(c2w, 64, 64, 1.0)
    u, v, z = project_point(cam, (0, 0, 0))
    assert (u, v, z) == pytest.approx((31.5, 31.5, 5.0))
    assert project_point(cam, (0, 1, 0))[1] < v  # world +y is image-up here


def test_camera_blender_round_trip():
    cam = look_at((1.0, -3.0, 2.0), (0.1, 0, 0), width=32, height=24, fx=40.0)
    back = camera_from_blender(camera_to_blender(cam), 32, 24, 2 * np.arctan(16 / 40.0))
    np.testing.assert_allclose(back.R, cam.R, atol=1e-12)
    np.testing.assert_allclose(back.t, cam.t, atol=1e-12)


def test_bad_transform():
    with pytest.raises(DataFormatError):
        camera_from_blender(np.eye(3), 8, 8, 1.0)
    with pytest.raises(DataFormatError):
        camera_from_blender(np.diag([2.0, 1, 1, 1]), 8, 8, 1.0)


def test_depth_file_round_trip(tmp_path):
    d = np.arange(12, dtype=float).reshape(3, 4) / 7
    write_depth(tmp_path / "d.dpth", d)
    np.testing.assert_allclose(read_depth(tmp_path / "d.dpth"), d, rtol=1e-7)
    (tmp_path / "bad.dpth").write_bytes(b"DPTH" + b"\x04\0\0\0\x04\0\0\0" + b"\0" * 8)
    with pytest.raises(DataFormatError):
        read_depth(tmp_path / "bad.dpth")


def test_missing_transforms(tmp_path):
    with pytest.raises(DataFormatError, match="transforms.json"):
        load_blender(tmp_path)


def test_missing_image_and_fields(tmp_path):
    meta = {"camera_angle_x": 1.0, "frames": [{"file_path": "a", "transform_matrix": np.eye(4).tolist()}]}
    (tmp_path / "transforms.json").write_text(json.dumps(meta))
    with pytest.raises(DataFormatError, match="missing image"):
        load_blender(tmp_path)
    meta["frames"] = [{"transform_matrix": np.eye(4).tolist()}]
    (tmp_path / "transforms.json").write_text(json.dumps(meta))
    with pytest.raises(DataFormatError, match="file_path"):
        load_blender(tmp_path)
    (tmp_path / "transforms.json").write_text("{not json")
    with pytest.raises(DataFormatError):
        load_blender(tmp_path)


def test_rgba_alpha_becomes_silhouette(tmp_path):
    rgba = np.zeros((4, 4, 4), np.uint8)
    rgba[..., :3] = 200
    rgba[1:3, 1:3, 3] = 255
    rgba[0, 0, 3] = 100
    write_png(tmp_path / "f.png", rgba)
    meta = {"camera_angle_x": 1.0, "background": [1, 1, 1],
            "frames": [{"file_path": "f", "transform_matrix": np.eye(4).tolist()}]}
    (tmp_path / "transforms.json").write_text(json.dumps(meta))
    view = load_blender(tmp_path).views[0]
    assert view.mask.sum() == 4 and view.mask[1, 1] and not view.mask[0, 0]
    # Transparent pixels composite to the white background.
    np.testing.assert_allclose(view.image[3, 3], 1.0)
    np.testing.assert_allclose(view.image[1, 1], 200 / 255)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 6, 3)).astype(np.uint8)
    write_png(tmp_path / "x.png", img)
    assert np.array_equal(read_png(tmp_path / "x.png"), img)


def test_sphere_disc_radius():
    spec = SceneSpec.sphere(radius=1.0, width=201, height=201)
    cam = spec.cameras()[0][0]
    _, depth = ray_trace(spec, cam)
    # Silhouette of a sphere of radius r at distance D: angular radius asin(r / D).
    D = spec.radius
    r_px = cam.fx * np.tan(np.arcsin(1.0 / D))
    area = (depth > 0).sum()
    assert area == pytest.approx(np.pi * r_px**2, rel=0.01)


def test_sphere_centre_depth():
    spec = SceneSpec.sphere(radius=0.8, width=65, height=65)
    cam = spec.cameras()[0][0]
    color, depth = ray_trace(spec, cam)
    assert depth[32, 32] == pytest.approx(spec.radius - 0.8, abs=1e-9)
    assert np.array_equal(depth > 0, color.sum(-1) > 0)


def test_box_face_depth():
    spec = SceneSpec([Primitive("box", (0, 0, 0), (1, 1, 1), (1, 1, 1))], elevation_deg=0, width=33, height=33)
    cam = spec.cameras()[0][0]
    # Looking horizontally at a cube centred on the origin: the nearest face is
    # at z = radius - 0.5 only when viewing square-on, otherwise it is nearer.
    _, depth = ray_trace(spec, cam)
    assert 0 < depth[16, 16] <= spec.radius - 0.5 + 1e-9


def test_scene_cameras():
    spec = SceneSpec.sphere_and_box(n_cameras=6, n_heldout=2)
    train, held = spec.cameras()
    assert len(train) == 6 and len(held) == 2
    for cam in train + held:
        assert np.linalg.norm(cam.center) == pytest.approx(spec.radius)
        assert project_point(cam, (0, 0, 0))[:2] == pytest.approx((63.5, 63.5))
    centres = np.array([c.center for c in train])
    assert not any(np.allclose(h.center, centres, atol=1e-6) for h in held)


def test_synth_round_trip(tmp_path):
    spec = SceneSpec.sphere_and_box(width=32, height=32, background=(0.1, 0.2, 0.3))
    direct = render_dataset(spec)
    ds = synth(spec, tmp_path)
    assert [v.name for v in ds.views] == [v.name for v in direct.views]
    assert len(ds.train) == 6 and len(ds.heldout) == 2
    for a, b in zip(ds.views, direct.views):
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-9
        assert np.array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.depth, b.depth, rtol=1e-6)
        np.testing.assert_allclose(a.camera.R, b.camera.R, atol=1e-9)
    np.testing.assert_allclose(ds.background, (0.1, 0.2, 0.3))


def test_scene_spec_dict_round_trip():
    spec = SceneSpec.sphere_and_box(seed=3)
    assert SceneSpec.from_dict(spec.to_dict()) == spec
