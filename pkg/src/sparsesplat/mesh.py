"""Mesh extraction from a Gaussian cloud: density grid, iso-surface, smoothing, decimation, output."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from skimage import measure

from .errors import DataFormatError, InvalidInputError
from .gaussians import GaussianCloud, read_ply_header
from .geometry import quat_to_matrix

ISO_LEVEL = 0.3
SMOOTH_ITERATIONS = 5
TARGET_FACES = 100_000


@dataclass
class ScalarField:
    values: np.ndarray  # (nx, ny, nz), sample i sits at bounds[0] + i * spacing
    bounds: np.ndarray  # (2, 3)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise InvalidInputError("field needs at least 2 samples per axis")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("field values must be finite")

    @property
    def spacing(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / (np.array(self.values.shape) - 1)

    @classmethod
    def from_function(cls, fn, bounds, resolution: int) -> "ScalarField":
        """Sample ``fn(points (..., 3)) -> values`` on a regular grid."""
        bounds = np.asarray(bounds, dtype=np.float64)
        axes = [np.linspace(bounds[0, i], bounds[1, i], resolution) for i in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
        return cls(fn(grid), bounds)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("face index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per face side, sorted within each row."""
        e = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        return np.sort(e, axis=1)

    def unique_edges(self) -> tuple[np.ndarray, np.ndarray]:
        return np.unique(self.edges(), axis=0, return_counts=True)

    def is_watertight(self) -> bool:
        if len(self.faces) == 0:
            return False
        _, counts = self.unique_edges()
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return len(used) - len(self.unique_edges()[0]) + len(self.faces)

    def connected_components(self) -> int:
        if len(self.faces) == 0:
            return 0
        used = np.unique(self.faces)
        e = self.edges()
        adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])),
                                shape=(len(self.vertices),) * 2)
        _, labels = connected_components(adj, directed=False)
        return len(np.unique(labels[used]))

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def signed_volume(self) -> float:
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def compact(self) -> "TriangleMesh":
        """Drop unreferenced vertices and faces that repeat an index."""
        f = self.faces
        f = f[(f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])]
        used, inverse = np.unique(f, return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3))


@numba.njit(cache=True)
def _splat_density(mu, inv_cov, half, alpha, lo, spacing, shape, out):
    for g in range(mu.shape[0]):
        i0 = np.empty(3, dtype=np.int64)
        i1 = np.empty(3, dtype=np.int64)
        for a in range(3):
            i0[a] = max(int(math.ceil((mu[g, a] - half[g, a] - lo[a]) / spacing[a])), 0)
            i1[a] = min(int(math.floor((mu[g, a] + half[g, a] - lo[a]) / spacing[a])), shape[a] - 1)
        for i in range(i0[0], i1[0] + 1):
            dx = lo[0] + i * spacing[0] - mu[g, 0]
            for j in range(i0[1], i1[1] + 1):
                dy = lo[1] + j * spacing[1] - mu[g, 1]
                for k in range(i0[2], i1[2] + 1):
                    dz = lo[2] + k * spacing[2] - mu[g, 2]
                    q = inv_cov[g]
                    m2 = (q[0, 0] * dx * dx + q[1, 1] * dy * dy + q[2, 2] * dz * dz
                          + 2.0 * (q[0, 1] * dx * dy + q[0, 2] * dx * dz + q[1, 2] * dy * dz))
                    if m2 <= 9.0:
                        out[i, j, k] += alpha[g] * math.exp(-0.5 * m2)


def opacity_field(cloud: GaussianCloud, bounds, resolution: int = 128,
                  min_opacity: float | None = None) -> ScalarField:
    """Sum of opacity-weighted Gaussian densities on a regular grid, each truncated at 3 sigma.

    ``min_opacity`` drops Gaussians below that opacity before sampling.
    """
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if resolution < 2:
        raise InvalidInputError("resolution must be at least 2")
    shape = np.array([resolution] * 3)
    values = np.zeros(tuple(shape))
    if min_opacity is not None:
        cloud = cloud.subset(cloud.opacities >= min_opacity)
    if len(cloud):
        rot = quat_to_matrix(cloud.rotations)
        s = cloud.scales
        cov = (rot * s[:, None, :] ** 2) @ np.swapaxes(rot, 1, 2)
        inv_cov = (rot / s[:, None, :] ** 2) @ np.swapaxes(rot, 1, 2)
        half = 3.0 * np.sqrt(np.diagonal(cov, axis1=1, axis2=2))
        spacing = (bounds[1] - bounds[0]) / (shape - 1)
        _splat_density(cloud.positions, np.ascontiguousarray(inv_cov), half, cloud.opacities,
                       bounds[0], spacing, shape, values)
    return ScalarField(values, bounds)


def marching_cubes(field: ScalarField, iso: float = ISO_LEVEL) -> TriangleMesh:
    """Iso-surface at ``iso``; faces wind outward from the region where the field exceeds ``iso``.

    Returns an empty mesh when ``iso`` is outside the field's range.
    """
    v = field.values
    if not (v.min() < iso < v.max()):
        return TriangleMesh.empty()
    verts, faces, _, _ = measure.marching_cubes(v, level=iso, spacing=tuple(field.spacing),
                                                method="lewiner", allow_degenerate=False)
    # skimage winds faces toward increasing values; flip so normals leave the dense region
    mesh = TriangleMesh(verts + field.bounds[0], faces[:, ::-1]).compact()
    return mesh


def _neighbour_matrix(mesh: TriangleMesh):
    e = np.unique(mesh.edges(), axis=0)
    n = len(mesh.vertices)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    return sparse.diags(inv) @ adj, deg > 0


def laplacian_smooth(mesh: TriangleMesh, iterations: int = SMOOTH_ITERATIONS,
                     factor: float = 0.5) -> TriangleMesh:
    """Umbrella-operator smoothing: each vertex moves ``factor`` of the way to its neighbour mean."""
    if iterations < 0:
        raise InvalidInputError("iterations must be non-negative")
    verts = mesh.vertices.copy()
    if iterations == 0 or len(mesh.faces) == 0:
        return TriangleMesh(verts, mesh.faces.copy())
    avg, has = _neighbour_matrix(mesh)
    for _ in range(iterations):
        verts[has] += factor * (avg @ verts - verts)[has]
    return TriangleMesh(verts, mesh.faces.copy())


def _face_quadrics(verts, faces):
    v = verts[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    area2 = np.linalg.norm(n, axis=1)
    unit = n / np.where(area2 > 0, area2, 1.0)[:, None]
    plane = np.concatenate([unit, -(unit * v[:, 0]).sum(1, keepdims=True)], 1)
    return 0.5 * area2[:, None, None] * plane[:, :, None] * plane[:, None, :]


def _collapse_target(Q, pa, pb):
    A = Q[:3, :3]
    if abs(np.linalg.det(A)) > 1e-12 * max(np.abs(A).max(), 1e-30) ** 3:
        p = np.linalg.solve(A, -Q[:3, 3])
        if np.linalg.norm(p - 0.5 * (pa + pb)) <= 2.0 * np.linalg.norm(pa - pb):
            h = np.append(p, 1.0)
            return float(h @ Q @ h), p
    best = None
    for p in (pa, pb, 0.5 * (pa + pb)):
        h = np.append(p, 1.0)
        c = float(h @ Q @ h)
        if best is None or c < best[0]:
            best = (c, p)
    return best


def decimate(mesh: TriangleMesh, target_faces: int = TARGET_FACES) -> TriangleMesh:
    """Quadric-error edge collapse down to at most ``target_faces`` faces.

    Collapses that would make the mesh non-manifold (link condition) or flip a
    face are skipped, so a watertight manifold input stays one. Stops early if
    no legal collapse remains.
    """
    if target_faces < 0:
        raise InvalidInputError("target_faces must be non-negative")
    if len(mesh.faces) <= target_faces:
        return TriangleMesh(mesh.vertices.copy(), mesh.faces.copy())
    verts = mesh.vertices.copy()
    faces = mesh.faces.copy()
    n_faces = len(faces)
    face_alive = np.ones(n_faces, dtype=bool)
    vert_faces = [set() for _ in range(len(verts))]
    for f, tri in enumerate(faces):
        for v in tri:
            vert_faces[v].add(f)
    Q = np.zeros((len(verts), 4, 4))
    np.add.at(Q, faces[:, 0], kf := _face_quadrics(verts, faces))
    np.add.at(Q, faces[:, 1], kf)
    np.add.at(Q, faces[:, 2], kf)
    version = np.zeros(len(verts), dtype=np.int64)
    alive = np.ones(len(verts), dtype=bool)

    def neighbours(v):
        out = set()
        for f in vert_faces[v]:
            out.update(faces[f].tolist())
        out.discard(v)
        return out

    heap = []

    def push(a, b):
        if a > b:
            a, b = b, a
        cost, p = _collapse_target(Q[a] + Q[b], verts[a], verts[b])
        heapq.heappush(heap, (cost, a, b, version[a], version[b], tuple(p)))

    for a, b in np.unique(mesh.edges(), axis=0):
        push(int(a), int(b))

    while n_faces > target_faces and heap:
        _, a, b, va, vb, p = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or version[a] != va or version[b] != vb:
            continue
        shared = vert_faces[a] & vert_faces[b]
        if len(shared) != 2:
            continue
        if len(neighbours(a) & neighbours(b)) != 2 or n_faces - 2 < 4:
            continue
        p = np.array(p)
        ok = True
        for f in (vert_faces[a] | vert_faces[b]) - shared:
            tri = verts[faces[f]]
            new = tri.copy()
            new[(faces[f] == a) | (faces[f] == b)] = p
            n_old = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            n_new = np.cross(new[1] - new[0], new[2] - new[0])
            if n_old @ n_new <= 1e-12 * (n_old @ n_old):
                ok = False
                break
        if not ok:
            continue
        for f in shared:
            face_alive[f] = False
            for v in faces[f]:
                vert_faces[v].discard(f)
        n_faces -= 2
        for f in vert_faces[b]:
            faces[f][faces[f] == b] = a
            vert_faces[a].add(f)
        vert_faces[b] = set()
        alive[b] = False
        verts[a] = p
        Q[a] += Q[b]
        version[a] += 1
        for n in neighbours(a):
            push(a, n)
    return TriangleMesh(verts, faces[face_alive]).compact()


def write_mesh(mesh: TriangleMesh, path, format: str | None = None) -> None:
    """Write binary little-endian PLY (float vertices, uchar/int face lists) or OBJ."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for f in mesh.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    elif fmt == "ply":
        header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}",
                  "property float x", "property float y", "property float z",
                  f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
        faces = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        faces["n"] = 3
        faces["idx"] = mesh.faces
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(mesh.vertices.astype("<f4").tobytes())
            fh.write(faces.tobytes())
    else:
        raise InvalidInputError(f"unknown mesh format {fmt!r}")


def read_mesh(path) -> TriangleMesh:
    """Read a triangle mesh written by :func:`write_mesh`."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"no such file: {path}")
    if path.suffix.lower() == ".obj":
        verts, faces = [], []
        for line in path.read_text().splitlines():
            parts = line.split()
            if parts and parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts and parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
        return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    with open(path, "rb") as fh:
        elements, fmt = read_ply_header(fh)
        if fmt != "binary_little_endian":
            raise DataFormatError(f"unsupported PLY format {fmt!r}")
        data = {}
        for name, count, props in elements:
            if name == "vertex":
                dt = np.dtype([(p, "<" + t) for p, t in props])
                rec = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt, count=count)
                data["v"] = np.stack([rec["x"], rec["y"], rec["z"]], -1).astype(np.float64)
            elif name == "face":
                (_, (_, cnt_t, idx_t)), = props
                dt = np.dtype([("n", "<" + cnt_t), ("idx", "<" + idx_t, (3,))])
                rec = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt, count=count)
                if count and np.any(rec["n"] != 3):
                    raise DataFormatError("only triangle faces are supported")
                data["f"] = rec["idx"].astype(np.int64)
    return TriangleMesh(data.get("v", np.zeros((0, 3))), data.get("f", np.zeros((0, 3), np.int64)))


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron with ``20 * 4**subdivisions`` faces."""
    t = (1 + 5**0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t),
             (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def extract_mesh(cloud: GaussianCloud, bounds, resolution: int = 128, iso: float = ISO_LEVEL,
                 smooth_iterations: int = SMOOTH_ITERATIONS, target_faces: int = TARGET_FACES,
                 min_opacity: float | None = None) -> TriangleMesh:
    """Density grid, marching cubes, Laplacian smoothing and decimation in one call."""
    mesh = marching_cubes(opacity_field(cloud, bounds, resolution, min_opacity), iso)
    return decimate(laplacian_smooth(mesh, smooth_iterations), target_faces)
