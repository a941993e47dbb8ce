"""
Rendering a handful of Gaussians
================================

Build a tiny cloud by hand, render it, compare one pixel with the brute-force
reference and look at the gradients the backward pass produces.
"""
import numpy as np

from sparsesplat.gaussians import GaussianCloud, RenderSettings
from sparsesplat.geometry import look_at
from sparsesplat.rasterizer import render, render_backward, render_pixel_oracle

# Three Gaussians: red in front, green behind, a wide blue one further back.
cloud = GaussianCloud.from_points(
    positions=[[0.0, -0.5, 0.0], [0.2, 0.0, 0.1], [-0.1, 0.6, -0.1]],
    colors=[[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.2, 0.3, 0.9]],
    log_scales=np.log([0.15, 0.2, 0.4]),
    opacity=0.8,
)
cam = look_at((0.0, -4.0, 0.5), (0, 0, 0), width=64, height=48, fov_x=np.deg2rad(40))
settings = RenderSettings(background=(1.0, 1.0, 1.0))

out = render(cloud, cam, settings)
print("colour", out.color.shape, "alpha range", out.alpha.min(), out.alpha.max())
print("max accumulated depth", out.depth.max())

# The reference loops over every Gaussian for a single pixel. With the tile
# and alpha cutoffs disabled the two agree to rounding error.
exact = RenderSettings.exact(background=(1.0, 1.0, 1.0))
row, col = 24, 32
ref_color, ref_alpha, _ = render_pixel_oracle(cloud, cam, exact, (row, col))
print("pixel", (row, col), render(cloud, cam, exact).color[row, col], "reference", ref_color)

# Gradient of the mean red channel: the red Gaussian's colour coefficient
# gets the largest push, the hidden blue one almost none.
grad_color = np.zeros_like(out.color)
grad_color[..., 0] = 1.0 / (64 * 48)
g = render_backward(cloud, cam, settings, grad_color=grad_color)
print("d(mean red)/d(sh dc, red channel):", g.sh[:, 0, 0])
print("d(mean red)/d(position):\n", g.positions)
