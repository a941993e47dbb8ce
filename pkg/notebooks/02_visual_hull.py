"""
Initial Gaussians from silhouettes
==================================

Ray-trace a sphere from six cameras, intersect the silhouette cones by random
sampling, and turn the surviving points into coloured Gaussians.
"""
import tempfile

import numpy as np

from sparsesplat.hull import assign_colors, carve, default_bounds, init_gaussians
from sparsesplat.synth import SceneSpec, synth

workdir = tempfile.mkdtemp()
dataset = synth(SceneSpec.sphere(radius=0.8, width=96, height=96), workdir)
train = dataset.train
cams = [v.camera for v in train]
print(len(train), "training views,", len(dataset.heldout), "held out; written to", workdir)

bounds = default_bounds(cams)
points = carve(cams, [v.mask for v in train], bounds, n_samples=200_000, seed=0)
box_volume = np.prod(bounds[1] - bounds[0])
print(f"hull keeps {len(points)} of 200000 samples: volume {len(points) / 2e5 * box_volume:.3f}, "
      f"sphere volume {4 / 3 * np.pi * 0.8**3:.3f}")

# Six views around a ring cannot carve away everything: the hull is larger
# than the sphere, mostly above and below it.
r = np.linalg.norm(points, axis=1)
print("fraction of hull points outside the sphere:", np.mean(r > 0.8))

samples = assign_colors(points[:3000], cams, [v.image for v in train])
cloud = init_gaussians(samples, init_opacity=0.1, knn=3)
print(len(cloud), "Gaussians, median scale", np.median(cloud.scales))
print("mean colour", samples.colors.mean(0))
