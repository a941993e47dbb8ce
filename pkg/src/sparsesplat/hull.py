"""Visual-hull initialisation: carve random points against silhouettes, colour them, make Gaussians."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError
from .gaussians import GaussianCloud
from .geometry import Camera, project_points


class EmptyHullWarning(UserWarning):
    pass


@dataclass
class HullSamples:
    positions: np.ndarray  # (M, 3)
    colors: np.ndarray  # (M, 3) in [0, 1]
    excluded: int = 0  # points dropped because no view saw them

    def __len__(self):
        return len(self.positions)


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    """Boolean silhouette from a float mask in [0, 1] (or uint8 0..255)."""
    mask = np.asarray(mask)
    if mask.dtype == np.uint8:
        return mask > 127
    if mask.dtype == bool:
        return mask
    return mask > threshold


def default_bounds(cameras: list[Camera]) -> np.ndarray:
    """Cube around the origin spanning what the narrowest view sees at the origin's depth."""
    half = min(np.linalg.norm(c.center) * max(c.width / (2 * c.fx), c.height / (2 * c.fy))
               for c in cameras)
    return np.array([[-half] * 3, [half] * 3])


def _pixel_lookup(cam: Camera, points: np.ndarray):
    """Nearest pixel ``(row, col)`` and whether it lies inside the image and in front."""
    uv, _, visible = project_points(cam, points)
    with np.errstate(invalid="ignore"):
        col = np.floor(uv[:, 0] + 0.5)
        row = np.floor(uv[:, 1] + 0.5)
        inside = visible & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    col = np.where(inside, col, 0).astype(np.int64)
    row = np.where(inside, row, 0).astype(np.int64)
    return row, col, inside


def inside_silhouettes(points, cameras: list[Camera], silhouettes) -> np.ndarray:
    """Boolean per point: visible in every view and on a foreground pixel there."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = np.ones(len(points), dtype=bool)
    for cam, sil in zip(cameras, silhouettes):
        sil = binarize(sil)
        if sil.shape != cam.shape:
            raise InvalidInputError(f"silhouette {sil.shape} does not match camera {cam.shape}")
        row, col, inside = _pixel_lookup(cam, points)
        keep &= inside & sil[row, col]
    return keep


def carve(cameras: list[Camera], silhouettes, bounds=None, n_samples: int = 1_000_000,
          seed: int = 0, chunk: int = 250_000) -> np.ndarray:
    """Uniform random points in ``bounds`` that fall inside every silhouette.

    Args:
        cameras: one camera per view.
        silhouettes: matching ``(H, W)`` masks (bool, float in [0, 1] or uint8).
        bounds: ``(2, 3)`` array ``[min, max]``; see :func:`default_bounds` if omitted.
        n_samples: number of candidate points.
        seed: RNG seed; identical seeds give identical output.

    Returns:
        ``(M, 3)`` retained points in sample order. Warns with
        :class:`EmptyHullWarning` when nothing survives.
    """
    if len(cameras) < 1 or len(cameras) != len(silhouettes):
        raise InvalidInputError("need at least one view and one silhouette per camera")
    if n_samples < 1:
        raise InvalidInputError("n_samples must be at least 1")
    bounds = default_bounds(cameras) if bounds is None else np.asarray(bounds, dtype=np.float64)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(bounds[0], bounds[1], size=(n_samples, 3))
    keep = np.concatenate([inside_silhouettes(pts[i:i + chunk], cameras, silhouettes)
                           for i in range(0, n_samples, chunk)])
    out = pts[keep]
    if len(out) == 0:
        warnings.warn("visual hull is empty", EmptyHullWarning, stacklevel=2)
    return out


def bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W, C) at pixel coordinates with border clamping."""
    H, W = image.shape[:2]
    u = np.clip(u, 0, W - 1)
    v = np.clip(v, 0, H - 1)
    x0 = np.minimum(np.floor(u).astype(np.int64), W - 2) if W > 1 else np.zeros(len(u), np.int64)
    y0 = np.minimum(np.floor(v).astype(np.int64), H - 2) if H > 1 else np.zeros(len(v), np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def assign_colors(points, cameras: list[Camera], images) -> HullSamples:
    """Average bilinear colour of each point over the views it is visible in."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    total = np.zeros((len(points), 3))
    count = np.zeros(len(points))
    for cam, img in zip(cameras, images):
        img = np.asarray(img, dtype=np.float64)
        _, _, inside = _pixel_lookup(cam, points)
        uv, _, _ = project_points(cam, points[inside])
        total[inside] += bilinear(img, uv[:, 0], uv[:, 1])[:, :3]
        count[inside] += 1
    seen = count > 0
    excluded = int((~seen).sum())
    if excluded:
        warnings.warn(f"{excluded} points are visible in no view and were dropped", stacklevel=2)
    return HullSamples(points[seen], total[seen] / count[seen, None], excluded)


def init_gaussians(samples: HullSamples, init_opacity: float = 0.1, knn: int = 3,
                   degree: int = 0) -> GaussianCloud:
    """Isotropic Gaussians at the samples, sized by mean distance to ``knn`` neighbours."""
    if len(samples) < knn + 1:
        raise InvalidInputError(f"need at least {knn + 1} samples, got {len(samples)}")
    if not 0 < init_opacity < 1:
        raise InvalidInputError("init_opacity must be in (0, 1)")
    dist, _ = cKDTree(samples.positions).query(samples.positions, k=knn + 1)
    mean = np.maximum(dist[:, 1:].mean(1), 1e-7)
    return GaussianCloud.from_points(samples.positions, np.clip(samples.colors, 0, 1),
                                     np.log(mean), init_opacity, degree)


def random_box_samples(bounds, n: int, seed: int = 0) -> HullSamples:
    """Uniform points with random colours, the no-hull baseline initialisation."""
    bounds = np.asarray(bounds, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return HullSamples(rng.uniform(bounds[0], bounds[1], (n, 3)), rng.uniform(0, 1, (n, 3)))
