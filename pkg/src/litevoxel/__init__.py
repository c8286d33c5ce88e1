"""Sparse voxel radiance fields with depth-aware pruning and footprint-gated subdivision."""

from .geometry import Camera, camera_depth, inter_ray_spacing, pixel_ray
from .io import Dataset, load_dataset, read_ppm, save_dataset, write_ppm
from .losses import ConfigError, gamma_schedule, lf_loss, sobel_map, ssim, total_loss
from .optimizer import Adam
from .pruning import PruneConfig, prune_step
from .rasterizer import render_image
from .subdivision import SubdivideConfig, select_and_split
from .synth import BoxPrimitive, SceneSpec, synthesize, three_box_scene
from .trainer import TrainConfig, evaluate, psnr, train
from .voxel_grid import VoxelGrid, init_uniform, model_bytes

__all__ = [
    "Adam", "BoxPrimitive", "Camera", "ConfigError", "Dataset", "PruneConfig", "SceneSpec",
    "SubdivideConfig", "TrainConfig", "VoxelGrid", "camera_depth", "evaluate", "gamma_schedule",
    "init_uniform", "inter_ray_spacing", "lf_loss", "load_dataset", "model_bytes", "pixel_ray",
    "prune_step", "psnr", "read_ppm", "render_image", "save_dataset", "select_and_split",
    "sobel_map", "ssim", "synthesize", "three_box_scene", "total_loss", "train", "write_ppm",
]
