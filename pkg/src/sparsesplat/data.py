"""Datasets of posed views and the file formats they are stored in.

Dataset directory layout (Blender ``transforms.json`` convention)::

    transforms.json
        camera_angle_x     horizontal field of view, radians
        camera_angle_y     optional; defaults to the same focal length as x
        background         optional RGB in [0, 1]; default black
        bounds             optional [[xmin, ymin, zmin], [xmax, ymax, zmax]]
        frames[]:
            file_path          image path relative to the directory; ".png" appended if no suffix
            transform_matrix   4x4 camera-to-world, OpenGL axes (x right, y up, z back)
            split              optional "train" | "heldout"; default "train"
            depth_path         optional DPTH depth prior
            mask_path          optional 8-bit grayscale silhouette (foreground > 127)

An RGBA image's alpha channel gives the silhouette (alpha > 127) and the
colour is composited over the background.

DPTH depth file: ``b"DPTH"``, u32 LE width, u32 LE height, then
``height * width`` float32 LE values, row-major.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataFormatError
from .geometry import Camera

_FLIP = np.diag([1.0, -1.0, -1.0])


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray | None = None  # (H, W) bool
    depth: np.ndarray | None = None  # (H, W) prior, arbitrary units
    name: str = ""
    split: str = "train"


@dataclass
class Dataset:
    views: list[View]
    bounds: np.ndarray | None = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def train(self) -> list[View]:
        return [v for v in self.views if v.split == "train"]

    @property
    def heldout(self) -> list[View]:
        return [v for v in self.views if v.split != "train"]


def read_png(path) -> np.ndarray:
    """uint8 array of a PNG (``(H, W)`` grayscale or ``(H, W, C)``)."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
            return np.asarray(im).copy()
    except FileNotFoundError:
        raise DataFormatError(f"missing image: {path}") from None
    except OSError as exc:
        raise DataFormatError(f"unreadable image {path}: {exc}") from None


def write_png(path, array) -> None:
    """Write a float [0, 1] or uint8 array as PNG."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        array = np.round(np.clip(array, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(array).save(path)


def write_depth(path, depth) -> None:
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(b"DPTH" + struct.pack("<II", w, h))
        fh.write(depth.tobytes())


def read_depth(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataFormatError(f"missing depth file: {path}") from None
    if len(raw) < 12 or raw[:4] != b"DPTH":
        raise DataFormatError(f"{path} is not a DPTH file")
    w, h = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * w * h:
        raise DataFormatError(f"{path}: expected {w}x{h} floats, got {(len(raw) - 12) // 4}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float64)


def camera_from_blender(c2w, width: int, height: int, angle_x: float,
                        angle_y: float | None = None) -> Camera:
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.shape != (4, 4) or not np.all(np.isfinite(c2w)):
        raise DataFormatError("transform_matrix must be a finite 4x4 matrix")
    rot = c2w[:3, :3] @ _FLIP
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-5 or np.linalg.det(rot) < 0:
        raise DataFormatError("transform_matrix rotation is not orthonormal")
    R = rot.T
    t = -R @ c2w[:3, 3]
    fx = 0.5 * width / np.tan(0.5 * angle_x)
    fy = fx if angle_y is None else 0.5 * height / np.tan(0.5 * angle_y)
    # Blender puts pixel centres at +0.5; ours are at integers
    return Camera(fx, fy, width / 2.0 - 0.5, height / 2.0 - 0.5, width, height, R, t)


def camera_to_blender(cam: Camera) -> np.ndarray:
    c2w = np.eye(4)
    c2w[:3, :3] = cam.R.T @ _FLIP
    c2w[:3, 3] = cam.center
    return c2w


def load_blender(directory) -> Dataset:
    """Load a dataset directory (see module docstring)."""
    directory = Path(directory)
    meta_path = directory / "transforms.json"
    if not meta_path.is_file():
        raise DataFormatError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        angle_x = float(meta["camera_angle_x"])
        frames = meta["frames"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed transforms.json: {exc}") from None
    background = np.asarray(meta.get("background", [0.0, 0.0, 0.0]), dtype=np.float64)
    views = []
    for i, frame in enumerate(frames):
        if not isinstance(frame, dict) or not isinstance(frame.get("file_path"), str):
            raise DataFormatError(f"frame {i} has no file_path")
        rel = Path(frame["file_path"])
        if not rel.suffix:
            rel = rel.with_suffix(".png")
        raw = read_png(directory / rel)
        if raw.ndim == 2:
            raw = np.repeat(raw[..., None], 3, -1)
        h, w = raw.shape[:2]
        rgb = raw[..., :3].astype(np.float64) / 255.0
        mask = None
        if raw.shape[-1] == 4:
            a = raw[..., 3].astype(np.float64)[..., None] / 255.0
            rgb = rgb * a + background * (1 - a)
            mask = raw[..., 3] > 127
        if "mask_path" in frame:
            m = read_png(directory / frame["mask_path"])
            m = m[..., 0] if m.ndim == 3 else m
            if m.shape != (h, w):
                raise DataFormatError(f"frame {i}: mask size {m.shape} does not match image {(h, w)}")
            mask = m > 127
        depth = None
        if "depth_path" in frame:
            depth = read_depth(directory / frame["depth_path"])
            if depth.shape != (h, w):
                raise DataFormatError(f"frame {i}: depth size {depth.shape} does not match image {(h, w)}")
        if "transform_matrix" not in frame:
            raise DataFormatError(f"frame {i} has no transform_matrix")
        cam = camera_from_blender(frame["transform_matrix"], w, h, angle_x, meta.get("camera_angle_y"))
        views.append(View(cam, rgb, mask, depth, rel.with_suffix("").as_posix(), frame.get("split", "train")))
    if not any(v.split == "train" for v in views):
        raise DataFormatError("dataset has no training views")
    bounds = np.asarray(meta["bounds"], dtype=np.float64) if "bounds" in meta else None
    return Dataset(views, bounds, background)


def save_blender(dataset: Dataset, directory) -> None:
    """Write ``dataset`` in the layout :func:`load_blender` reads.

    All views must share one camera intrinsics. Masks go to the alpha channel
    and depth priors to DPTH files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cam0 = dataset.views[0].camera
    frames = []
    for view in dataset.views:
        rel = Path(view.name or f"view_{len(frames):03d}")
        (directory / rel).parent.mkdir(parents=True, exist_ok=True)
        img = np.round(np.clip(view.image, 0, 1) * 255).astype(np.uint8)
        if view.mask is not None:
            img = np.concatenate([img, (view.mask.astype(np.uint8) * 255)[..., None]], -1)
        write_png(directory / rel.with_suffix(".png"), img)
        frame = {"file_path": rel.as_posix(), "split": view.split,
                 "transform_matrix": camera_to_blender(view.camera).tolist()}
        if view.depth is not None:
            write_depth(directory / rel.with_suffix(".dpth"), view.depth)
            frame["depth_path"] = rel.with_suffix(".dpth").as_posix()
        frames.append(frame)
    meta = {"camera_angle_x": float(2 * np.arctan(0.5 * cam0.width / cam0.fx)),
            "camera_angle_y": float(2 * np.arctan(0.5 * cam0.height / cam0.fy)),
            "background": [float(c) for c in dataset.background], "frames": frames}
    if dataset.bounds is not None:
        meta["bounds"] = np.asarray(dataset.bounds).tolist()
    (directory / "transforms.json").write_text(json.dumps(meta, indent=2))
