"""
A short reconstruction
======================

Fit Gaussians to the synthetic sphere-and-box scene for a few hundred
iterations at low resolution and score the held-out views. The acceptance
suite runs the same thing at 128x128 for 2000 iterations.
"""
import tempfile

import numpy as np

from sparsesplat.pipeline import PipelineConfig, evaluate, format_table, initial_cloud, reconstruct
from sparsesplat.synth import SceneSpec, synth

dataset = synth(SceneSpec.sphere_and_box(width=64, height=64), tempfile.mkdtemp())
cfg = PipelineConfig.load(None, ["train.iterations=400", "train.log_interval=100", "hull.n_samples=50000"])

init = initial_cloud(dataset, cfg.hull)
print("initial Gaussians:", len(init))
print(format_table(evaluate(init, dataset.heldout, dataset.background), "init"))

cloud, log = reconstruct(dataset, cfg, init)
for rec in log.records:
    parts = ", ".join(f"{k} {v:.4f}" for k, v in rec.parts.items())
    print(f"iter {rec.iteration:4d}  loss {rec.loss:.4f}  ({parts})  {rec.count} Gaussians")
print(format_table(evaluate(cloud, dataset.heldout, dataset.background), "fitted"))

# Most Gaussians end up near the surfaces; opacities spread out from the
# initial 0.1.
print("opacity quartiles", np.percentile(cloud.opacities, [25, 50, 75]))
