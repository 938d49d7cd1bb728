"""Dual-domain unified undersampled-MRI reconstruction on a numpy autodiff core."""

from .blocks import XBBConfig
from .engine import ParamStore, Tape, Tensor, backward
from .gradcheck import finite_diff_check
from .metrics import psnr, ssim
from .model import ModelConfig, count_model_params, init_model_params, recurrent_forward
from .mri import (
    SamplingMask,
    data_consistency,
    degrade_reference,
    fft2c,
    ifft2c,
    make_cartesian_mask,
    undersample,
)
from .phantom import PhantomPair, gen_phantom_pair
from .training import MetricRecord, TrainConfig, dudo_loss, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "XBBConfig",
    "ParamStore",
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_check",
    "psnr",
    "ssim",
    "ModelConfig",
    "count_model_params",
    "init_model_params",
    "recurrent_forward",
    "SamplingMask",
    "data_consistency",
    "degrade_reference",
    "fft2c",
    "ifft2c",
    "make_cartesian_mask",
    "undersample",
    "PhantomPair",
    "gen_phantom_pair",
    "MetricRecord",
    "TrainConfig",
    "dudo_loss",
    "evaluate",
    "train",
]
