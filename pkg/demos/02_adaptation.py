"""One adaptation step by hand: depth bins, prune guards, then budgeted splits.

Run: python3 demos/02_adaptation.py
"""

import numpy as np

from litevoxel import PruneConfig, SubdivideConfig, init_uniform, synthesize, three_box_scene
from litevoxel.pruning import assign_depth_bins, keep_halo_mask, prune_step
from litevoxel.rasterizer import render_image
from litevoxel.subdivision import priorities, select_and_split, update_usefulness_all

ds = synthesize(three_box_scene())
cams = ds.cameras
grid = init_uniform(((-1, -1, -1), (1, 1, 1)), 3, alpha0=0.5)
print(f"start: {len(grid)} voxels at level 3")

# Render every view once to fill the statistics window (w_max, residuals).
for cam, gt in zip(cams, ds.images):
    render_image(grid, cam, collect_stats=True, target=gt)
update_usefulness_all(grid, 0.5)

bins = assign_depth_bins(grid, cams, 8)
print("depth-bin populations:", np.bincount(bins).tolist())

cfg = PruneConfig()
protected = keep_halo_mask(grid, cams, cfg)
print(f"keep-halo protects {protected.sum()} voxels")

# Every voxel starts in the "in" state, so early candidates come from the
# per-bin quantile alone; the per-step cap then bounds removals.
report = prune_step(grid, cams, cfg, t=500, T=2000)
print(f"pruned {report.total_removed} (cap {report.cap}, cap-limited {report.cap_limited})")
for b in report.bins[:3]:
    print(f"  bin {b.bin}: population {b.population}, tau {b.tau:.4f}, pruned {b.pruned}")

sub = SubdivideConfig(hard_cap=8 * 512)
elig, prio = priorities(grid, cams, sub)
print(f"{elig.sum()} voxels eligible for splitting (h > footprint)")
budget = sub.budget_for(len(grid))
split = select_and_split(grid, cams, sub)
print(f"split {len(split.split)} voxels (budget {budget}), now {len(grid)} voxels; "
      f"top priority {split.priorities[0]:.4g}")
