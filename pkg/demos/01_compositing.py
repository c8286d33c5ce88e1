"""Front-to-back compositing on a tiny voxel column, and its gradient.

Run: python3 demos/01_compositing.py
"""

import numpy as np

from litevoxel import VoxelGrid
from litevoxel.voxel_grid import logit
from litevoxel.rasterizer import Segment, composite_backward, composite_forward

# Two stacked voxels: a half-transparent red one in front of a half-transparent green one.
grid = VoxelGrid(((-1, -1, -1), (1, 1, 1)), l_max=4)
eps = 1e-12
grid.add_voxels([[3, 3, 3, 0], [3, 3, 3, 1]], [
    [logit(1 - eps), logit(eps), logit(eps), 0.0],
    [logit(eps), logit(1 - eps), logit(eps), 0.0],
])
ray = [Segment((3, 3, 3, 0), 0.0, 1.0), Segment((3, 3, 3, 1), 1.0, 2.0)]

color, T, weights = composite_forward(ray, grid)
print("weights", weights, "transmittance", T)
print("pixel color", np.round(color, 6))

# Swapping the order changes the pixel: compositing is not commutative.
print("reversed", np.round(composite_forward(ray[::-1], grid)[0], 6))

# Gradient of the red channel with respect to every parameter, checked by
# a central difference on the front voxel's opacity logit.
grad = composite_backward(ray, grid, np.array([1.0, 0.0, 0.0]), 0.0)
h = 1e-5
grid.params[0, 3] += h
up = composite_forward(ray, grid)[0][0]
grid.params[0, 3] -= 2 * h
down = composite_forward(ray, grid)[0][0]
grid.params[0, 3] += h
print(f"d red / d theta_front: analytic {grad[0, 3]:.8f}, numeric {(up - down) / (2 * h):.8f}")
