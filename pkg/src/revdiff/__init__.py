"""revdiff: a reversible 3D U-Net diffusion trainer whose backward pass
reconstructs activations instead of storing them, with byte-exact
accounting that makes the memory savings measurable and testable."""

from .rng import Prng
from .revgraph import (
    MODE_RECOMPUTE,
    MODE_STORE,
    MemoryReport,
    Param,
    Tape,
)
from .iunet import IUNet, IUNetConfig, checkpoint_load, checkpoint_save
from .diffusion import (
    BetaSchedule,
    TrainConfig,
    cosine_schedule,
    diffusion_loss,
    p_sample_loop,
    q_sample,
    train_loop,
)
from .data import PhantomSpec, Volume, gen_phantom, normalize, volume_read, volume_write
from .metrics import mae, psnr, ssim3d

__all__ = [
    "Prng",
    "MODE_RECOMPUTE",
    "MODE_STORE",
    "MemoryReport",
    "Param",
    "Tape",
    "IUNet",
    "IUNetConfig",
    "checkpoint_load",
    "checkpoint_save",
    "BetaSchedule",
    "TrainConfig",
    "cosine_schedule",
    "diffusion_loss",
    "p_sample_loop",
    "q_sample",
    "train_loop",
    "PhantomSpec",
    "Volume",
    "gen_phantom",
    "normalize",
    "volume_read",
    "volume_write",
    "mae",
    "psnr",
    "ssim3d",
]
