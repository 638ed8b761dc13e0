"""Multi-scale residual image restoration on a small numpy autodiff engine.

Modules:

* :mod:`~mirnetv2.tensor`: tensors, tape, reverse-mode autodiff
* :mod:`~mirnetv2.nn`: grouped conv2d, 2x resampling, ReLU
* :mod:`~mirnetv2.blocks`: SKFF, RCB, MRB, RRG, full model, parameter store
* :mod:`~mirnetv2.train`: Charbonnier loss, Adam, schedules, training loop
* :mod:`~mirnetv2.data`: image I/O, synthetic degradations, patch sampling
* :mod:`~mirnetv2.metrics` / :mod:`~mirnetv2.costs`: PSNR/SSIM/MAE and cost accounting
* :mod:`~mirnetv2.cli`: ``mirnetv2 train|infer|eval|analyze``
"""

from .blocks import ParamStore, init_params, model_forward, zero_params
from .config import ConfigError, DatasetSpec, ModelConfig, RunConfig, TrainConfig, load_run_config
from .costs import CostReport, count_costs
from .metrics import mae, psnr, ssim
from .tensor import FLOAT32, FLOAT64, Tape, Tensor, backward
from .train import TrainState, adam_step, charbonnier_loss, cosine_lr, progressive_patch, train_loop

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CostReport",
    "DatasetSpec",
    "FLOAT32",
    "FLOAT64",
    "ModelConfig",
    "ParamStore",
    "RunConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "adam_step",
    "backward",
    "charbonnier_loss",
    "cosine_lr",
    "count_costs",
    "init_params",
    "load_run_config",
    "mae",
    "model_forward",
    "progressive_patch",
    "psnr",
    "ssim",
    "train_loop",
    "zero_params",
]
