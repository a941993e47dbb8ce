import numpy as np
import pytest

from sparsesplat.errors import InvalidInputError
from sparsesplat.geometry import look_at
from sparsesplat.hull import (EmptyHullWarning, HullSamples, assign_colors, bilinear, binarize, carve,
                              default_bounds, init_gaussians, inside_silhouettes, random_box_samples)

AXES = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def axis_cameras(dist=100.0, size=512, extent=1.3):
    """Six nearly orthographic views along the coordinate axes, ``extent`` world units across."""
    cams = []
    for d in AXES:
        up = (0, 0, 1) if d[2] == 0 else (0, 1, 0)
        cams.append(look_at(np.array(d, float) * dist, (0, 0, 0), up, width=size, height=size,
                            fx=size * dist / extent))
    return cams


def box_silhouette(cam, half=0.5):
    """Pixels whose centre ray hits the axis-aligned box ``[-half, half]^3`` (slab test)."""
    rows, cols = np.mgrid[0:cam.height, 0:cam.width]
    d_cam = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy, np.ones(rows.shape)], -1)
    d = d_cam @ cam.R  # camera -> world directions
    o = cam.center
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-half - o) / d
        t1 = (half - o) / d
    near = np.nanmax(np.minimum(t0, t1), -1)
    far = np.nanmin(np.maximum(t0, t1), -1)
    return far >= np.maximum(near, 0)


def test_box_silhouette_oracle_is_square():
    cam = axis_cameras(size=130)[0]
    sil = box_silhouette(cam)
    # 1 unit out of 1.3 across 130 pixels: about 100 pixels wide.
    assert abs(sil.sum(1).max() - 100) <= 2 and abs(sil.sum(0).max() - 100) <= 2


def test_cube_volume_and_containment():
    cams = axis_cameras()
    sils = [box_silhouette(c) for c in cams]
    bounds = np.array([[-1.0] * 3, [1.0] * 3])
    pts = carve(cams, sils, bounds, 1_000_000, seed=0)
    volume = len(pts) / 1e6 * 8.0
    assert abs(volume - 1.0) <= 0.02
    assert inside_silhouettes(pts, cams, sils).all()


def test_carving_is_monotone_in_views():
    cams = axis_cameras(size=64)
    sils = [box_silhouette(c) for c in cams]
    bounds = np.array([[-1.0] * 3, [1.0] * 3])
    previous = None
    for k in range(1, 7):
        pts = carve(cams[:k], sils[:k], bounds, 20_000, seed=3)
        if previous is not None:
            assert set(map(tuple, pts)) <= previous
        previous = set(map(tuple, pts))


def test_carve_is_seeded():
    cams = axis_cameras(size=32)
    sils = [box_silhouette(c) for c in cams]
    a = carve(cams, sils, None, 5000, seed=1)
    assert np.array_equal(a, carve(cams, sils, None, 5000, seed=1))
    assert not np.array_equal(a, carve(cams, sils, None, 5000, seed=2))


def test_empty_hull_warns():
    cams = axis_cameras(size=16)
    with pytest.warns(EmptyHullWarning):
        pts = carve(cams, [np.zeros((16, 16), bool)] * 6, None, 1000)
    assert pts.shape == (0, 3)


def test_carve_validates():
    cams = axis_cameras(size=16)
    with pytest.raises(InvalidInputError):
        carve(cams, [np.ones((16, 16))] * 5)
    with pytest.raises(InvalidInputError):
        carve(cams[:1], [np.ones((8, 8))])


def test_binarize():
    assert binarize(np.array([0, 127, 128, 255], np.uint8)).tolist() == [False, False, True, True]
    assert binarize(np.array([0.2, 0.7])).tolist() == [False, True]


def test_default_bounds_cover_view():
    cam = look_at((0, -4, 0), (0, 0, 0), width=100, height=50, fx=100.0)
    np.testing.assert_allclose(default_bounds([cam]), [[-2.0] * 3, [2.0] * 3])


def test_bilinear():
    img = np.arange(12, dtype=float).reshape(3, 4, 1)
    assert bilinear(img, np.array([1.0]), np.array([2.0]))[0, 0] == img[2, 1, 0]
    half = bilinear(img, np.array([1.5]), np.array([0.5]))[0, 0]
    assert half == pytest.approx(img[0:2, 1:3, 0].mean())
    # Outside the image the border value is used.
    assert bilinear(img, np.array([-5.0]), np.array([99.0]))[0, 0] == img[2, 0, 0]


def test_assign_colors_averages_views():
    cams = axis_cameras(size=16)[:2]
    images = [np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.6)]
    s = assign_colors(np.zeros((3, 3)), cams, images)
    np.testing.assert_allclose(s.colors, 0.4)
    assert s.excluded == 0


def test_assign_colors_drops_unseen_points():
    cams = axis_cameras(size=16)[:1]
    with pytest.warns(UserWarning):
        s = assign_colors(np.array([[0, 0, 0], [0, 50.0, 0]]), cams, [np.ones((16, 16, 3))])
    assert len(s) == 1 and s.excluded == 1


def test_init_gaussians_uses_neighbour_spacing():
    g = np.stack(np.meshgrid(*[np.arange(5) * 0.1] * 3, indexing="ij"), -1).reshape(-1, 3)
    cloud = init_gaussians(HullSamples(g, np.full((len(g), 3), 0.5)), init_opacity=0.1, knn=3)
    interior = np.all((g > 0.05) & (g < 0.35), axis=1)
    np.testing.assert_allclose(cloud.scales[interior], 0.1, rtol=1e-9)
    np.testing.assert_allclose(cloud.opacities, 0.1)
    np.testing.assert_allclose(cloud.rotations[:, 0], 1.0)
    with pytest.raises(InvalidInputError):
        init_gaussians(HullSamples(g[:3], np.zeros((3, 3))))


def test_random_box_samples():
    s = random_box_samples([[0, 0, 0], [1, 2, 3]], 1000, seed=0)
    assert np.all(s.positions >= 0) and np.all(s.positions <= [1, 2, 3])
