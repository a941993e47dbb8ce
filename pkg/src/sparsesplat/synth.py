"""Analytic ground-truth scenes: ray-traced spheres and boxes seen from a camera ring."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, View, load_blender, save_blender
from .errors import InvalidInputError
from .geometry import Camera, look_at

LIGHT_DIR = np.array([0.4, -0.3, 0.85]) / np.linalg.norm([0.4, -0.3, 0.85])
AMBIENT = 0.35


@dataclass
class Primitive:
    kind: str  # "sphere" or "box"
    center: tuple[float, float, float]
    size: float | tuple[float, float, float]  # sphere radius, or box edge lengths
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise InvalidInputError(f"unknown primitive kind {self.kind!r}")


@dataclass
class SceneSpec:
    """Primitives plus a ring of cameras around the origin (z is up).

    Training cameras sit at ``elevation_deg`` and evenly spaced azimuths;
    held-out cameras sit half-way between consecutive training cameras.
    """

    primitives: list[Primitive]
    n_cameras: int = 6
    n_heldout: int = 2
    radius: float = 4.0
    elevation_deg: float = 20.0
    heldout_elevation_deg: float | None = None
    width: int = 128
    height: int = 128
    fov_x_deg: float = 40.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    bounds: list | None = field(default=None)

    def __post_init__(self):
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives]
        if not self.primitives:
            raise InvalidInputError("a scene needs at least one primitive")
        if self.n_cameras < 2:
            raise InvalidInputError("a scene needs at least two cameras")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def sphere(cls, radius: float = 0.8, **kw) -> "SceneSpec":
        return cls([Primitive("sphere", (0.0, 0.0, 0.0), radius, (0.85, 0.35, 0.2))], **kw)

    @classmethod
    def sphere_and_box(cls, **kw) -> "SceneSpec":
        return cls([Primitive("sphere", (-0.3, 0.2, 0.25), 0.55, (0.9, 0.45, 0.2)),
                    Primitive("box", (0.35, -0.25, -0.25), (0.7, 0.6, 0.6), (0.25, 0.55, 0.9))], **kw)

    def cameras(self) -> tuple[list[Camera], list[Camera]]:
        rng = np.random.default_rng(self.seed)
        phase = rng.uniform(0.0, 360.0 / self.n_cameras)
        step = 360.0 / self.n_cameras

        def ring(azimuths, elevation):
            el = np.radians(elevation)
            cams = []
            for az in np.radians(azimuths):
                eye = self.radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
                cams.append(look_at(eye, (0, 0, 0), width=self.width, height=self.height,
                                    fov_x=np.radians(self.fov_x_deg)))
            return cams

        train = ring(phase + step * np.arange(self.n_cameras), self.elevation_deg)
        spacing = max(1, self.n_cameras // max(self.n_heldout, 1))
        held_az = phase + step * (np.arange(self.n_heldout) * spacing + 0.5)
        held_el = self.elevation_deg if self.heldout_elevation_deg is None else self.heldout_elevation_deg
        return train, ring(held_az, held_el)


def _intersect(prim: Primitive, origin, dirs):
    """Hit parameter along ``dirs`` (inf on miss) and outward normals."""
    c = np.asarray(prim.center, dtype=np.float64)
    n = len(dirs)
    if prim.kind == "sphere":
        r = float(prim.size)
        oc = origin - c
        a = (dirs * dirs).sum(1)
        b = 2 * dirs @ oc
        disc = b * b - 4 * a * (oc @ oc - r * r)
        t = np.full(n, np.inf)
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        tt = np.where(t0 > 0, t0, t1)
        hit &= tt > 0
        t[hit] = tt[hit]
        normals = (origin + dirs * np.where(hit, t, 0)[:, None] - c) / r
        return t, normals
    half = 0.5 * np.broadcast_to(np.asarray(prim.size, dtype=np.float64), (3,))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (c - half - origin) * inv
        tb = (c + half - origin) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(hit, np.where(tmin > 0, tmin, tmax), np.inf)
    p = origin + dirs * np.where(hit, t, 0)[:, None]
    rel = (p - c) / half
    axis = np.argmax(np.abs(rel), axis=1)
    normals = np.zeros((n, 3))
    normals[np.arange(n), axis] = np.sign(rel[np.arange(n), axis])
    return t, normals


def ray_trace(spec: SceneSpec, cam: Camera):
    """Colour ``(H, W, 3)`` and camera z-depth ``(H, W)`` (0 on background)."""
    rows, cols = np.mgrid[0:cam.height, 0:cam.width]
    d_cam = np.stack([(cols.ravel() - cam.cx) / cam.fx, (rows.ravel() - cam.cy) / cam.fy,
                      np.ones(cols.size)], -1)
    # unnormalised rays with unit camera-z, so the hit parameter is the z-depth
    dirs = d_cam @ cam.R
    origin = cam.center
    best = np.full(len(dirs), np.inf)
    color = np.tile(np.asarray(spec.background, dtype=np.float64), (len(dirs), 1))
    for prim in spec.primitives:
        t, normals = _intersect(prim, origin, dirs)
        closer = t < best
        best[closer] = t[closer]
        shade = AMBIENT + (1 - AMBIENT) * np.clip(normals[closer] @ LIGHT_DIR, 0, None)
        color[closer] = np.asarray(prim.color) * shade[:, None]
    depth = np.where(np.isfinite(best), best, 0.0)
    shape = (cam.height, cam.width)
    return np.clip(color, 0, 1).reshape(shape + (3,)), depth.reshape(shape)


def render_dataset(spec: SceneSpec) -> Dataset:
    train, held = spec.cameras()
    views = []
    for split, cams in (("train", train), ("heldout", held)):
        for i, cam in enumerate(cams):
            color, depth = ray_trace(spec, cam)
            views.append(View(cam, color, depth > 0, depth, f"{split}/r_{i}", split))
    bounds = None if spec.bounds is None else np.asarray(spec.bounds, dtype=np.float64)
    return Dataset(views, bounds, np.asarray(spec.background, dtype=np.float64))


def synth(spec: SceneSpec, outdir) -> Dataset:
    """Ray-trace ``spec`` into a dataset directory and load it back."""
    save_blender(render_dataset(spec), outdir)
    return load_blender(outdir)
