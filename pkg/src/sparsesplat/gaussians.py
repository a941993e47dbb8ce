"""Gaussian scene representation, spherical-harmonic colour and PLY storage.

PLY layout (binary little-endian, one ``vertex`` element, all ``float``)::

    x y z                      position
    rot_0 rot_1 rot_2 rot_3    quaternion (w, x, y, z)
    scale_0 scale_1 scale_2    log standard deviations
    opacity                    opacity logit
    f_dc_0 f_dc_1 f_dc_2       SH band 0 per channel
    f_rest_0 ... f_rest_{3(B-1)-1}
                               higher bands, channel-major (all R, then G, then B)

Optional ``nx ny nz`` properties are accepted on load and ignored.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import DataFormatError, InvalidInputError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

LEARNABLE = ("positions", "rotations", "log_scales", "opacity_logits", "sh")


def num_sh_coeffs(degree: int) -> int:
    if degree not in (0, 1, 2, 3):
        raise InvalidInputError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sh_degree_of(n_coeffs: int) -> int:
    deg = math.isqrt(n_coeffs) - 1
    if (deg + 1) ** 2 != n_coeffs or deg not in (0, 1, 2, 3):
        raise InvalidInputError(f"{n_coeffs} is not a valid SH coefficient count")
    return deg


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values ``(N, (degree+1)^2)`` at unit directions ``(N, 3)``."""
    num_sh_coeffs(degree)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs.T
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, -1)


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Derivatives ``(N, B, 3)`` of :func:`sh_basis` w.r.t. the direction components."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs.T
    o = np.zeros_like(x)
    rows = [(o, o, o)]
    if degree >= 1:
        c = SH_C1
        rows += [(o, o - c, o), (o, o, o + c), (o - c, o, o)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        rows += [(c[0] * y, c[0] * x, o), (o, c[1] * z, c[1] * y),
                 (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z), (c[3] * z, o, c[3] * x),
                 (2 * c[4] * x, -2 * c[4] * y, o)]
    if degree >= 3:
        c = SH_C3
        rows += [(c[0] * 6 * x * y, c[0] * (3 * xx - 3 * yy), o),
                 (c[1] * y * z, c[1] * x * z, c[1] * x * y),
                 (-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z),
                 (-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
                 (c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z),
                 (2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)),
                 (c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, o)]
    return np.stack([np.stack(r, -1) for r in rows], 1)


def eval_color(coeffs, view_dir, deg: int) -> np.ndarray:
    """RGB colour from SH coefficients seen along ``view_dir``.

    ``coeffs`` is ``(3, B)`` (or ``(N, 3, B)`` with ``view_dir`` ``(N, 3)``);
    bands above ``deg`` are ignored. The result is ``clip(sum + 0.5, 0, 1)``.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    single = coeffs.ndim == 2
    coeffs = np.atleast_3d(coeffs) if not single else coeffs[None]
    view_dir = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    nb = num_sh_coeffs(deg)
    if coeffs.shape[-1] < nb:
        raise InvalidInputError(f"degree {deg} needs {nb} coefficients, got {coeffs.shape[-1]}")
    norms = np.linalg.norm(view_dir, axis=-1)
    if np.any(np.abs(norms - 1) > 1e-3):
        raise InvalidInputError("view direction must be unit length")
    basis = sh_basis(view_dir / norms[:, None], deg)
    rgb = np.clip(np.einsum("ncb,nb->nc", coeffs[..., :nb], basis) + 0.5, 0.0, 1.0)
    return rgb[0] if single else rgb


def rgb_to_sh_dc(rgb) -> np.ndarray:
    """Band-0 coefficient that reproduces ``rgb`` under :func:`eval_color`."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def _shaped(a, shape, name) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    try:
        return a.reshape(shape)
    except ValueError:
        raise InvalidInputError(f"{name} has shape {a.shape}, expected {shape}") from None


@dataclass
class GaussianCloud:
    """A set of ``N`` anisotropic 3D Gaussians.

    Attributes:
        positions: ``(N, 3)`` means.
        rotations: ``(N, 4)`` quaternions ``(w, x, y, z)``.
        log_scales: ``(N, 3)`` log standard deviations.
        opacity_logits: ``(N,)``; opacity is ``sigmoid(opacity_logits)``.
        sh: ``(N, 3, B)`` SH coefficients per colour channel, ``B = (deg+1)^2``.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.positions = _shaped(self.positions, (-1, 3), "positions")
        n = len(self.positions)
        self.rotations = _shaped(self.rotations, (n, 4), "rotations")
        self.log_scales = _shaped(self.log_scales, (n, 3), "log_scales")
        self.opacity_logits = _shaped(self.opacity_logits, (n,), "opacity_logits")
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = _shaped(sh, (n, 3, sh.shape[-1] if sh.ndim == 3 else 1), "sh")
        sh_degree_of(self.sh.shape[-1])

    @classmethod
    def empty(cls, degree: int = 0) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, 3, num_sh_coeffs(degree))))

    @classmethod
    def from_points(cls, positions, colors, log_scales, opacity=0.1, degree: int = 0) -> "GaussianCloud":
        """Isotropic, axis-aligned Gaussians with given colours and opacity."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        log_scales = np.asarray(log_scales, dtype=np.float64)
        if log_scales.ndim < 2:
            log_scales = np.broadcast_to(log_scales.reshape(-1, 1), (n, 3))
        sh = np.zeros((n, 3, num_sh_coeffs(degree)))
        sh[:, :, 0] = rgb_to_sh_dc(np.asarray(colors).reshape(n, 3))
        return cls(positions, rot, np.array(log_scales), np.full(n, float(logit(opacity))), sh)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return sh_degree_of(self.sh.shape[-1])

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianCloud":
        return replace(self, **{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, name)[index] for name in LEARNABLE))

    def check_finite(self) -> None:
        """Raise :class:`InvalidInputError` naming the first non-finite Gaussian."""
        bad = np.zeros(len(self), dtype=bool)
        for name in LEARNABLE:
            arr = getattr(self, name).reshape(len(self), -1) if len(self) else np.zeros((0, 1))
            bad |= ~np.all(np.isfinite(arr), axis=1)
        bad |= ~np.all(np.isfinite(self.scales), axis=1)
        if bad.any():
            raise InvalidInputError(f"Gaussian {int(np.argmax(bad))} has non-finite parameters")


@dataclass
class RenderSettings:
    """Rasterisation options.

    ``alpha_cutoff`` skips per-pixel contributions below it, ``extent_sigma``
    limits each splat to that many standard deviations (Mahalanobis radius),
    ``max_blend`` caps the number of blended contributions per pixel.
    """

    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_degree: int = 0
    alpha_cutoff: float = 1.0 / 255.0
    extent_sigma: float = 3.0
    max_blend: int | None = None

    def __post_init__(self):
        self.background = _shaped(self.background, (3,), "background")
        num_sh_coeffs(self.sh_degree)
        if self.alpha_cutoff < 0 or not self.extent_sigma > 0:
            raise InvalidInputError("cutoffs must be positive")
        if self.max_blend is not None and self.max_blend < 1:
            raise InvalidInputError("max_blend must be at least 1")

    @classmethod
    def exact(cls, **kw) -> "RenderSettings":
        """Settings with both cutoffs disabled (only the 0.99 alpha clamp remains)."""
        return cls(alpha_cutoff=0.0, extent_sigma=math.inf, **kw)


_CORE = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2",
         "opacity", "f_dc_0", "f_dc_1", "f_dc_2"]
_IGNORED = {"nx", "ny", "nz"}


def _property_names(n_coeffs: int) -> list[str]:
    return _CORE + [f"f_rest_{i}" for i in range(3 * (n_coeffs - 1))]


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write ``cloud`` as binary little-endian PLY (see module docstring)."""
    cloud.check_finite()
    names = _property_names(cloud.sh.shape[-1])
    n = len(cloud)
    data = np.empty((n, len(names)), dtype="<f4")
    data[:, 0:3] = cloud.positions
    data[:, 3:7] = cloud.rotations
    data[:, 7:10] = cloud.log_scales
    data[:, 10] = cloud.opacity_logits
    data[:, 11:14] = cloud.sh[:, :, 0]
    data[:, 14:] = cloud.sh[:, :, 1:].reshape(n, len(names) - 14)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


_PLY_TYPES = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2",
              "int16": "i2", "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4",
              "uint": "u4", "uint32": "u4", "float": "f4", "float32": "f4",
              "double": "f8", "float64": "f8"}


def read_ply_header(fh) -> tuple[list[tuple[str, int, list]], str]:
    """Parse a PLY header from a binary file handle.

    Returns the element list ``[(name, count, [(prop, dtype | ('list', cnt, item))])]``
    and the format string; the handle is left at the start of the body.
    """
    if fh.readline().strip() != b"ply":
        raise DataFormatError("not a PLY file")
    elements, fmt = [], None
    while True:
        line = fh.readline()
        if not line:
            raise DataFormatError("unterminated PLY header")
        parts = line.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format" and len(parts) == 3:
            fmt = parts[1]
        elif parts[0] == "element" and len(parts) == 3:
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property" and elements:
            if parts[1] == "list" and len(parts) == 5:
                elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise DataFormatError(f"bad property line: {line!r}")
        else:
            raise DataFormatError(f"bad header line: {line!r}")
    if fmt is None:
        raise DataFormatError("PLY header has no format line")
    return elements, fmt


def load_ply(path) -> GaussianCloud:
    """Read a cloud written by :func:`save_ply` (or a compatible 3DGS file)."""
    if not os.path.exists(path):
        raise DataFormatError(f"no such file: {path}")
    with open(path, "rb") as fh:
        elements, fmt = read_ply_header(fh)
        if fmt != "binary_little_endian":
            raise DataFormatError(f"unsupported PLY format {fmt!r}")
        if len(elements) != 1 or elements[0][0] != "vertex":
            raise DataFormatError("expected a single 'vertex' element")
        _, n, props = elements[0]
        if any(isinstance(t, tuple) for _, t in props):
            raise DataFormatError("list properties are not allowed in a Gaussian PLY")
        names = [p for p, _ in props]
        kept = [p for p in names if p not in _IGNORED]
        n_rest = sum(p.startswith("f_rest_") for p in kept)
        if n_rest % 3:
            raise DataFormatError("f_rest property count is not a multiple of 3")
        try:
            expected = _property_names(n_rest // 3 + 1)
        except InvalidInputError as exc:
            raise DataFormatError(str(exc)) from None
        if sorted(kept) != sorted(expected):
            missing = sorted(set(expected) - set(kept))
            extra = sorted(set(kept) - set(expected))
            raise DataFormatError(f"wrong property set (missing {missing}, unexpected {extra})")
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        body = fh.read(dtype.itemsize * n)
        if len(body) != dtype.itemsize * n:
            raise DataFormatError("PLY body is truncated")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    col = lambda keys: np.stack([rec[k].astype(np.float64) for k in keys], -1) if keys else np.zeros((n, 0))
    nb = n_rest // 3 + 1
    sh = np.empty((n, 3, nb))
    sh[:, :, 0] = col(["f_dc_0", "f_dc_1", "f_dc_2"])
    sh[:, :, 1:] = col([f"f_rest_{i}" for i in range(3 * (nb - 1))]).reshape(n, 3, nb - 1)
    cloud = GaussianCloud(col(["x", "y", "z"]), col([f"rot_{i}" for i in range(4)]),
                          col([f"scale_{i}" for i in range(3)]), rec["opacity"].astype(np.float64), sh)
    try:
        cloud.check_finite()
    except InvalidInputError as exc:
        raise DataFormatError(str(exc)) from None
    return cloud
