"""Voxel radiance fields fitted by score distillation against analytic diffusion oracles."""

from .diffusion import GuidedOracle, LatentCodec, NoiseSchedule, ScoreOracle
from .field import VoxelField, init_field, load_field, query, save_field
from .geometry import Camera, cast_rays, orbit_camera, stratified_sample
from .losses import LossBreakdown, LossConfig, total_loss
from .renderer import SamplingConfig, render, render_image
from .trainer import AnnealSchedule, TrainConfig, anneal_t, train

__version__ = "0.1.0"
