"""Deep QSM reconstruction from high-pass filtered SWI phase, on a numpy autodiff engine."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .metrics import aggregate, evaluate_pair, hfen_percent, psnr, rmse_percent, ssim
from .network import ModelConfig, forward, init_parameters, parameter_count
from .physics import (make_dataset, parse_phantom_spec, random_phantom_spec, render_phantom,
                      simulate_swi_phase)
from .tensor import Tensor, backward, conv3d, conv_transpose3d, grad_check
from .training import Trainer, TrainRunConfig, leave_one_out_split, reconstruct, train
from .volume import Volume, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ModelConfig",
    "Tensor",
    "TrainRunConfig",
    "Trainer",
    "Volume",
    "aggregate",
    "backward",
    "conv3d",
    "conv_transpose3d",
    "evaluate_pair",
    "forward",
    "grad_check",
    "hfen_percent",
    "init_parameters",
    "leave_one_out_split",
    "load_checkpoint",
    "make_dataset",
    "parameter_count",
    "parse_phantom_spec",
    "psnr",
    "random_phantom_spec",
    "read_volume",
    "reconstruct",
    "render_phantom",
    "rmse_percent",
    "save_checkpoint",
    "simulate_swi_phase",
    "ssim",
    "train",
    "write_volume",
]
