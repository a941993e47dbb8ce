"""Differentiable splatting of a :class:`GaussianCloud` into colour, alpha and depth.

Per pixel, Gaussians whose mean is in front of the camera are blended
front-to-back in order of camera-space depth (ties broken by index)::

    a_i   = min(0.99, opacity_i * exp(-0.5 d^T S_i^-1 d))
    C     = sum_i c_i a_i T_i + T_end * background
    A     = 1 - T_end
    D     = sum_i z_i a_i T_i                  (accumulated, not normalised)

with ``T_i = prod_{j<i} (1 - a_j)`` and ``d`` the offset of the pixel centre
from the projected mean. Contributions with ``a_i`` below the alpha cutoff, or
farther than ``extent_sigma`` standard deviations, are skipped.

Work is split into square tiles. Each tile keeps its own gradient buffer and
buffers are summed in a fixed order, so results do not depend on the number
of threads numba uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidInputError
from .gaussians import GaussianCloud, RenderSettings, sh_basis, sh_basis_jacobian, sigmoid
from .geometry import LOW_PASS, Z_NEAR, Camera, project_covariance, project_point, quat_to_matrix, \
    quat_to_matrix_vjp

# TBB in this environment is usually too old and numba warns on every import
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

TILE = 16
ALPHA_MAX = 0.99


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)


@dataclass
class ParamGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "ParamGradients":
        return cls(np.zeros_like(cloud.positions), np.zeros_like(cloud.rotations),
                   np.zeros_like(cloud.log_scales), np.zeros_like(cloud.opacity_logits),
                   np.zeros_like(cloud.sh))


@dataclass
class _Projected:
    """Screen-space splats sorted front to back, plus what backward needs."""

    ids: np.ndarray  # original indices, sorted by (depth, index)
    uv: np.ndarray
    conic: np.ndarray  # (K, 3): a, b, c of the inverse 2D covariance
    opacity: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    half_extent: np.ndarray  # (K, 2) bounding-box half sizes in pixels
    p_cam: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    basis: np.ndarray
    color_raw: np.ndarray


def _project(cloud: GaussianCloud, cam: Camera, settings: RenderSettings) -> _Projected:
    cloud.check_finite()
    deg = settings.sh_degree
    nb = (deg + 1) ** 2
    if cloud.sh.shape[-1] < nb:
        raise InvalidInputError(f"cloud stores SH degree {cloud.sh_degree}, render asks for {deg}")
    p_all = cam.world_to_camera(cloud.positions)
    keep = np.flatnonzero(p_all[:, 2] > Z_NEAR)
    order = keep[np.lexsort((keep, p_all[keep, 2]))]

    p = p_all[order]
    x, y, z = p.T
    rot = quat_to_matrix(cloud.rotations[order])
    scale = np.exp(cloud.log_scales[order])
    M = rot * scale[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)
    J = np.zeros((len(order), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z**2
    T = J @ cam.R
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    A, B, C = cov2d[:, 0, 0], 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0]), cov2d[:, 1, 1]
    det = A * C - B * B
    conic = np.stack([C / det, -B / det, A / det], -1)

    offset = cloud.positions[order] - cam.center
    dist = np.linalg.norm(offset, axis=1)
    dirs = offset / dist[:, None]
    basis = sh_basis(dirs, deg)
    color_raw = np.einsum("kcb,kb->kc", cloud.sh[order, :, :nb], basis) + 0.5

    ext = settings.extent_sigma
    half = ext * np.sqrt(np.stack([A, C], -1)) if math.isfinite(ext) else np.full((len(order), 2), np.inf)
    return _Projected(
        ids=order, uv=np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], -1),
        conic=conic, opacity=sigmoid(cloud.opacity_logits[order]),
        color=np.clip(color_raw, 0.0, 1.0), depth=z, half_extent=half, p_cam=p,
        cov3d=cov3d, cov2d=cov2d, rot=rot, scale=scale, dirs=dirs, dist=dist,
        basis=basis, color_raw=color_raw,
    )


@numba.njit(cache=True)
def _bin_tiles(uv, half, width, height, tile):
    tx = (width + tile - 1) // tile
    ty = (height + tile - 1) // tile
    k = uv.shape[0]
    lo = np.empty((k, 2), dtype=np.int64)
    hi = np.empty((k, 2), dtype=np.int64)
    counts = np.zeros(tx * ty, dtype=np.int64)
    for g in range(k):
        x0 = max(uv[g, 0] - half[g, 0], -1.0)
        x1 = min(uv[g, 0] + half[g, 0], float(width))
        y0 = max(uv[g, 1] - half[g, 1], -1.0)
        y1 = min(uv[g, 1] + half[g, 1], float(height))
        px0 = max(int(math.ceil(x0)), 0)
        px1 = min(int(math.floor(x1)), width - 1)
        py0 = max(int(math.ceil(y0)), 0)
        py1 = min(int(math.floor(y1)), height - 1)
        if px0 > px1 or py0 > py1:
            lo[g, 0] = 1
            hi[g, 0] = 0
            lo[g, 1] = 1
            hi[g, 1] = 0
            continue
        lo[g, 0] = px0 // tile
        hi[g, 0] = px1 // tile
        lo[g, 1] = py0 // tile
        hi[g, 1] = py1 // tile
        for j in range(lo[g, 1], hi[g, 1] + 1):
            for i in range(lo[g, 0], hi[g, 0] + 1):
                counts[j * tx + i] += 1
    offsets = np.zeros(tx * ty + 1, dtype=np.int64)
    for t in range(tx * ty):
        offsets[t + 1] = offsets[t] + counts[t]
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    for g in range(k):
        for j in range(lo[g, 1], hi[g, 1] + 1):
            for i in range(lo[g, 0], hi[g, 0] + 1):
                t = j * tx + i
                entries[fill[t]] = g
                fill[t] += 1
    return offsets, entries


@numba.njit(parallel=True, cache=True)
def _forward(offsets, entries, uv, conic, opacity, color, depth, bg, width, height, tile,
             alpha_cutoff, ext2, max_blend, out_color, out_alpha, out_depth):
    tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    for t in numba.prange(n_tiles):
        ox = (t % tx) * tile
        oy = (t // tx) * tile
        start = offsets[t]
        stop = offsets[t + 1]
        for py in range(oy, min(oy + tile, height)):
            for px in range(ox, min(ox + tile, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                n = 0
                for e in range(start, stop):
                    g = entries[e]
                    dx = px - uv[g, 0]
                    dy = py - uv[g, 1]
                    m2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m2 > ext2:
                        continue
                    a = opacity[g] * math.exp(-0.5 * m2)
                    if a > 0.99:
                        a = 0.99
                    if a < alpha_cutoff:
                        continue
                    w = a * T
                    c0 += color[g, 0] * w
                    c1 += color[g, 1] * w
                    c2 += color[g, 2] * w
                    d += depth[g] * w
                    T *= 1.0 - a
                    n += 1
                    if n == max_blend:
                        break
                out_color[py, px, 0] = c0 + T * bg[0]
                out_color[py, px, 1] = c1 + T * bg[1]
                out_color[py, px, 2] = c2 + T * bg[2]
                out_alpha[py, px] = 1.0 - T
                out_depth[py, px] = d


@numba.njit(parallel=True, cache=True)
def _backward(offsets, entries, uv, conic, opacity, color, depth, bg, width, height, tile,
              alpha_cutoff, ext2, max_blend, g_color, g_alpha, g_depth, local):
    # local[e] = d/d(u, v, conic_a, conic_b, conic_c, opacity, r, g, b, depth) for entry e
    tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    for t in numba.prange(n_tiles):
        ox = (t % tx) * tile
        oy = (t // tx) * tile
        start = offsets[t]
        stop = offsets[t + 1]
        m = stop - start
        c_e = np.empty(m, dtype=np.int64)
        c_a = np.empty(m)
        c_t = np.empty(m)
        c_g = np.empty(m)
        c_dx = np.empty(m)
        c_dy = np.empty(m)
        c_clamped = np.empty(m, dtype=np.bool_)
        for py in range(oy, min(oy + tile, height)):
            for px in range(ox, min(ox + tile, width)):
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                ga = g_alpha[py, px]
                gd = g_depth[py, px]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and ga == 0.0 and gd == 0.0:
                    continue
                T = 1.0
                n = 0
                for e in range(start, stop):
                    g = entries[e]
                    dx = px - uv[g, 0]
                    dy = py - uv[g, 1]
                    m2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m2 > ext2:
                        continue
                    gauss = math.exp(-0.5 * m2)
                    a = opacity[g] * gauss
                    clamped = a > 0.99
                    if clamped:
                        a = 0.99
                    if a < alpha_cutoff:
                        continue
                    c_e[n] = e
                    c_a[n] = a
                    c_t[n] = T
                    c_g[n] = gauss
                    c_dx[n] = dx
                    c_dy[n] = dy
                    c_clamped[n] = clamped
                    T *= 1.0 - a
                    n += 1
                    if n == max_blend:
                        break
                acc0 = T * bg[0]
                acc1 = T * bg[1]
                acc2 = T * bg[2]
                accd = 0.0
                for k in range(n - 1, -1, -1):
                    e = c_e[k]
                    g = entries[e]
                    a = c_a[k]
                    Tb = c_t[k]
                    w = a * Tb
                    local[e, 6] += w * gc0
                    local[e, 7] += w * gc1
                    local[e, 8] += w * gc2
                    local[e, 9] += w * gd
                    inv = 1.0 / (1.0 - a)
                    da = (gc0 * (color[g, 0] * Tb - acc0 * inv)
                          + gc1 * (color[g, 1] * Tb - acc1 * inv)
                          + gc2 * (color[g, 2] * Tb - acc2 * inv)
                          + gd * (depth[g] * Tb - accd * inv)
                          + ga * T * inv)
                    acc0 += color[g, 0] * w
                    acc1 += color[g, 1] * w
                    acc2 += color[g, 2] * w
                    accd += depth[g] * w
                    if c_clamped[k]:
                        continue
                    local[e, 5] += da * c_g[k]
                    dpow = da * a
                    dx = c_dx[k]
                    dy = c_dy[k]
                    local[e, 0] += dpow * (conic[g, 0] * dx + conic[g, 1] * dy)
                    local[e, 1] += dpow * (conic[g, 1] * dx + conic[g, 2] * dy)
                    local[e, 2] += -0.5 * dpow * dx * dx
                    local[e, 3] += -dpow * dx * dy
                    local[e, 4] += -0.5 * dpow * dy * dy


@numba.njit(cache=True)
def _reduce(entries, local, k):
    out = np.zeros((k, local.shape[1]))
    for e in range(entries.shape[0]):
        g = entries[e]
        for j in range(local.shape[1]):
            out[g, j] += local[e, j]
    return out


def _kernel_args(proj: _Projected, cam: Camera, settings: RenderSettings, tile: int):
    offsets, entries = _bin_tiles(proj.uv, proj.half_extent, cam.width, cam.height, tile)
    ext2 = settings.extent_sigma ** 2 if math.isfinite(settings.extent_sigma) else np.inf
    max_blend = -1 if settings.max_blend is None else int(settings.max_blend)
    return (offsets, entries, np.ascontiguousarray(proj.uv), np.ascontiguousarray(proj.conic),
            proj.opacity, np.ascontiguousarray(proj.color), proj.depth, settings.background,
            cam.width, cam.height, tile, float(settings.alpha_cutoff), float(ext2), max_blend)


def render(cloud: GaussianCloud, cam: Camera, settings: RenderSettings | None = None,
           tile: int = TILE) -> RenderOutput:
    """Render colour, accumulated alpha and accumulated depth images."""
    settings = settings or RenderSettings()
    proj = _project(cloud, cam, settings)
    H, W = cam.height, cam.width
    color = np.empty((H, W, 3))
    alpha = np.empty((H, W))
    depth = np.empty((H, W))
    _forward(*_kernel_args(proj, cam, settings, tile), color, alpha, depth)
    return RenderOutput(color, alpha, depth)


def render_backward(cloud: GaussianCloud, cam: Camera, settings: RenderSettings | None,
                    grad_color=None, grad_alpha=None, grad_depth=None,
                    tile: int = TILE) -> ParamGradients:
    """Gradients of ``sum(grad_color*color) + sum(grad_alpha*alpha) + sum(grad_depth*depth)``.

    Any upstream image left as ``None`` is treated as zero.
    """
    settings = settings or RenderSettings()
    H, W = cam.height, cam.width
    gC = np.zeros((H, W, 3)) if grad_color is None else np.asarray(grad_color, dtype=np.float64)
    gA = np.zeros((H, W)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64)
    gD = np.zeros((H, W)) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    if gC.shape != (H, W, 3) or gA.shape != (H, W) or gD.shape != (H, W):
        raise InvalidInputError("upstream gradient shapes do not match the camera image size")
    grads = ParamGradients.zeros_like(cloud)
    proj = _project(cloud, cam, settings)
    k = len(proj.ids)
    if k == 0:
        return grads
    args = _kernel_args(proj, cam, settings, tile)
    local = np.zeros((len(args[1]), 10))
    _backward(*args, np.ascontiguousarray(gC), np.ascontiguousarray(gA), np.ascontiguousarray(gD), local)
    g2d = _reduce(args[1], local, k)
    _chain(proj, cloud, cam, settings, g2d, grads)
    return grads


def _chain(proj: _Projected, cloud: GaussianCloud, cam: Camera, settings: RenderSettings,
           g2d: np.ndarray, out: ParamGradients) -> None:
    ids = proj.ids
    du, dv = g2d[:, 0], g2d[:, 1]
    d_conic = g2d[:, 2:5]
    d_opacity = g2d[:, 5]
    d_color = g2d[:, 6:9]
    d_depth = g2d[:, 9]

    out.opacity_logits[ids] = d_opacity * proj.opacity * (1.0 - proj.opacity)

    # colour: clip -> SH -> coefficients and view direction
    nb = proj.basis.shape[1]
    inside = (proj.color_raw > 0.0) & (proj.color_raw < 1.0)
    d_raw = d_color * inside
    out.sh[ids, :, :nb] = d_raw[:, :, None] * proj.basis[:, None, :]
    d_mu = np.zeros((len(ids), 3))
    if nb > 1:
        bj = sh_basis_jacobian(proj.dirs, settings.sh_degree)
        d_dir = np.einsum("kc,kcb,kbd->kd", d_raw, cloud.sh[ids, :, :nb], bj)
        d_mu += (d_dir - proj.dirs * (d_dir * proj.dirs).sum(1, keepdims=True)) / proj.dist[:, None]

    # inverse 2x2 covariance
    Q = np.empty((len(ids), 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    Gq = np.empty_like(Q)
    Gq[:, 0, 0], Gq[:, 1, 1] = d_conic[:, 0], d_conic[:, 2]
    Gq[:, 0, 1] = Gq[:, 1, 0] = 0.5 * d_conic[:, 1]
    d_cov2d = -Q @ Gq @ Q

    x, y, z = proj.p_cam.T
    fx, fy = cam.fx, cam.fy
    J = np.zeros((len(ids), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    W = cam.R
    T = J @ W
    d_cov3d = np.swapaxes(T, 1, 2) @ d_cov2d @ T
    d_T = 2.0 * d_cov2d @ T @ proj.cov3d
    d_J = d_T @ W.T

    z2, z3 = z**2, z**3
    d_p = np.zeros((len(ids), 3))
    d_p[:, 0] = -d_J[:, 0, 2] * fx / z2 + du * fx / z
    d_p[:, 1] = -d_J[:, 1, 2] * fy / z2 + dv * fy / z
    d_p[:, 2] = (-d_J[:, 0, 0] * fx / z2 + d_J[:, 0, 2] * 2 * fx * x / z3
                 - d_J[:, 1, 1] * fy / z2 + d_J[:, 1, 2] * 2 * fy * y / z3
                 - du * fx * x / z2 - dv * fy * y / z2 + d_depth)
    d_mu += d_p @ W
    out.positions[ids] = d_mu

    M = proj.rot * proj.scale[:, None, :]
    d_M = 2.0 * d_cov3d @ M
    d_scale = (d_M * proj.rot).sum(1)
    out.log_scales[ids] = d_scale * proj.scale
    d_rot = d_M * proj.scale[:, None, :]
    out.rotations[ids] = quat_to_matrix_vjp(cloud.rotations[ids], d_rot)


def render_pixel_oracle(cloud: GaussianCloud, cam: Camera, settings: RenderSettings | None,
                        pixel: tuple[int, int]) -> tuple[np.ndarray, float, float]:
    """Brute-force colour, alpha and depth of one pixel ``(row, col)``.

    Loops over every Gaussian with no extent or alpha cutoff; only the 0.99
    clamp is applied. Slow, meant as a reference for :func:`render`.
    """
    from .gaussians import eval_color
    from .geometry import compose_covariance

    settings = settings or RenderSettings()
    row, col = pixel
    splats = []
    for i in range(len(cloud)):
        try:
            u, v, z = project_point(cam, cloud.positions[i])
        except InvalidInputError:
            continue
        cov = compose_covariance(cloud.log_scales[i], cloud.rotations[i])
        cov2 = project_covariance(cam, cloud.positions[i], cov)
        d = np.array([col - u, row - v])
        power = -0.5 * d @ np.linalg.solve(cov2, d)
        a = min(ALPHA_MAX, float(sigmoid(cloud.opacity_logits[i])) * math.exp(power))
        view = cloud.positions[i] - cam.center
        c = eval_color(cloud.sh[i], view / np.linalg.norm(view), settings.sh_degree)
        splats.append((z, i, a, c))
    splats.sort(key=lambda s: (s[0], s[1]))
    T, color, depth = 1.0, np.zeros(3), 0.0
    for z, _, a, c in splats:
        color = color + c * a * T
        depth += z * a * T
        T *= 1.0 - a
    return color + T * settings.background, 1.0 - T, depth
