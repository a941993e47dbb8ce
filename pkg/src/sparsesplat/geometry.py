"""Pinhole cameras, quaternion algebra and EWA covariance projection.

Conventions used throughout the package:

* quaternions are ``(w, x, y, z)``;
* camera extrinsics map world to camera, ``p_cam = R @ p_world + t``;
* camera space is x right, y down, z forward (OpenCV);
* pixel ``(row, col)`` has its centre at image coordinates ``(u=col, v=row)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NotVisibleError

Z_NEAR = 1e-4
LOW_PASS = 0.3


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-to-camera pose.

    Args:
        fx, fy: focal lengths in pixels.
        cx, cy: principal point in pixels (pixel centres at integer coordinates).
        width, height: image size in pixels.
        R: 3x3 world-to-camera rotation.
        t: world-to-camera translation.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("camera pose must be finite")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image size must be at least 1x1")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise InvalidInputError("camera rotation must be a proper rotation")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix ``K [R | t]``."""
        return self.K @ np.hstack([self.R, self.t[:, None]])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def with_pose(self, R, t) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, R, t)


def look_at(eye, target, up=(0.0, 0.0, 1.0), *, width: int, height: int,
            fov_x: float | None = None, fx: float | None = None) -> Camera:
    """Camera at ``eye`` looking at ``target``; ``up`` is the world up vector.

    Exactly one of ``fov_x`` (radians) or ``fx`` must be given; ``fy = fx``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise InvalidInputError("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    if (fov_x is None) == (fx is None):
        raise InvalidInputError("give exactly one of fov_x or fx")
    if fx is None:
        fx = 0.5 * width / np.tan(0.5 * fov_x)
    return Camera(fx, fx, width / 2.0 - 0.5, height / 2.0 - 0.5, width, height, R, -R @ eye)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a quaternion ``(w, x, y, z)``.

    Accepts a single quaternion ``(4,)`` or a batch ``(N, 4)``. Input is
    renormalised, so ``q`` and ``-q`` give the same matrix.
    """
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("quaternion has non-finite components")
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidInputError("quaternion has zero norm")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_to_matrix_vjp(q: np.ndarray, grad_m: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. rotation matrices back to raw (unnormalised) quaternions.

    Args:
        q: ``(N, 4)`` quaternions as stored.
        grad_m: ``(N, 3, 3)`` gradient w.r.t. ``quat_to_matrix(q)``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    g = grad_m.reshape(-1, 9)
    # d(m_k)/d(w,x,y,z) for the nine entries in row-major order
    zero = np.zeros_like(w)
    dw = np.stack([zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero], -1)
    dx = np.stack([zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x], -1)
    dy = np.stack([-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y], -1)
    dz = np.stack([-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero], -1)
    gn = np.stack([(g * d).sum(-1) for d in (dw, dx, dy, dz)], -1)
    return (gn - qn * (gn * qn).sum(-1, keepdims=True)) / norm


def compose_covariance(log_scale, q) -> np.ndarray:
    """World covariance ``R S S^T R^T`` from log standard deviations and a rotation.

    Works on single inputs ``(3,), (4,)`` or batches ``(N, 3), (N, 4)``.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    s = np.exp(log_scale)
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise InvalidInputError("scales must be finite and positive")
    M = quat_to_matrix(q) * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def project_point(cam: Camera, mu, z_near: float = Z_NEAR) -> tuple[float, float, float]:
    """Pixel coordinates ``(u, v)`` and camera depth of a world point.

    Raises:
        NotVisibleError: if the camera-space depth is not beyond ``z_near``.
    """
    x, y, z = cam.world_to_camera(np.asarray(mu, dtype=np.float64).reshape(3))
    if not z > z_near:
        raise NotVisibleError(f"point at camera depth {z:g} is not in front of the camera")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z


def project_points(cam: Camera, points: np.ndarray, z_near: float = Z_NEAR):
    """Vectorised :func:`project_point`.

    Returns:
        ``(uv, z, visible)``: ``(N, 2)`` pixel coordinates, ``(N,)`` camera
        depths and the visibility mask. ``uv`` is NaN where not visible.
    """
    pc = cam.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    visible = z > z_near
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(visible, z, np.nan)
        uv = np.stack([cam.fx * pc[:, 0] / zs + cam.cx, cam.fy * pc[:, 1] / zs + cam.cy], -1)
    return uv, z, visible


def projection_jacobian(cam: Camera, p_cam: np.ndarray) -> np.ndarray:
    """``(..., 2, 3)`` Jacobian of the perspective map at camera-space points."""
    x, y, z = np.moveaxis(np.asarray(p_cam, dtype=np.float64), -1, 0)
    zero = np.zeros_like(z)
    J = np.stack([
        cam.fx / z, zero, -cam.fx * x / z**2,
        zero, cam.fy / z, -cam.fy * y / z**2,
    ], -1)
    return J.reshape(z.shape + (2, 3))


def project_covariance(cam: Camera, mu, cov, low_pass: float = LOW_PASS,
                       z_near: float = Z_NEAR) -> np.ndarray:
    """Screen-space covariance ``J W Σ W^T J^T + low_pass * I`` of one Gaussian.

    ``W`` is the view rotation; translation does not affect covariance.
    """
    p = cam.world_to_camera(np.asarray(mu, dtype=np.float64).reshape(3))
    if not p[2] > z_near:
        raise NotVisibleError(f"point at camera depth {p[2]:g} is not in front of the camera")
    T = projection_jacobian(cam, p) @ cam.R
    out = T @ np.asarray(cov, dtype=np.float64) @ T.T + low_pass * np.eye(2)
    return 0.5 * (out + out.T)
