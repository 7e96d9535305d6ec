"""Diffusion-based minority oversampling for imbalanced tabular data.

The residual attention/soft-threshold denoiser, a Gaussian diffusion
trainer and sampler, SMOTE/ADASYN baselines, a small classifier battery,
and evaluation metrics with Friedman/Nemenyi rank statistics.
"""
__version__ = "0.1.0"

from .dataio import Dataset, FeatureSpec, Normalizer, fit_encode, decode, load_keel, parse_csv, parse_keel
from .denoisers import MLPDenoiser, SemstResNet, build_denoiser
from .diffusion import linear_schedule, q_sample, sample, simple_loss
from .oversamplers import OversampleRequest, adasyn, balance, smote
from .trainer import Checkpoint, TrainConfig, load, save, train

__all__ = [
    "Dataset", "FeatureSpec", "Normalizer", "fit_encode", "decode", "load_keel", "parse_csv",
    "parse_keel", "MLPDenoiser", "SemstResNet", "build_denoiser", "linear_schedule", "q_sample",
    "sample", "simple_loss", "OversampleRequest", "adasyn", "balance", "smote", "Checkpoint",
    "TrainConfig", "load", "save", "train",
]
