"""
From Gaussians to a mesh
========================

Sample the opacity field of a Gaussian cloud, extract the 0.3 iso-surface,
smooth it and cut the face count, then write OBJ.
"""
import tempfile
from pathlib import Path

import numpy as np

from sparsesplat.gaussians import GaussianCloud
from sparsesplat.mesh import decimate, laplacian_smooth, marching_cubes, opacity_field, write_mesh

# A ring of Gaussians: the surface should come out as a torus (Euler characteristic 0).
angles = np.linspace(0, 2 * np.pi, 48, endpoint=False)
positions = np.stack([0.6 * np.cos(angles), 0.6 * np.sin(angles), np.zeros_like(angles)], 1)
cloud = GaussianCloud.from_points(positions, np.full((48, 3), 0.7), np.log(0.1), opacity=0.9)

bounds = np.array([[-1.0, -1.0, -0.5], [1.0, 1.0, 0.5]])
field = opacity_field(cloud, bounds, resolution=64)
print("field range", field.values.min(), field.values.max())

mesh = marching_cubes(field, iso=0.3)
print(f"marching cubes: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces, "
      f"watertight {mesh.is_watertight()}, Euler characteristic {mesh.euler_characteristic()}")

mesh = decimate(laplacian_smooth(mesh, iterations=5), target_faces=len(mesh.faces) // 4)
print(f"after smoothing and decimation: {len(mesh.faces)} faces, watertight {mesh.is_watertight()}")

path = Path(tempfile.mkdtemp()) / "ring.obj"
write_mesh(mesh, path)
print("wrote", path)
