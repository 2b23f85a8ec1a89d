"""Stain deconvolution, stain augmentation and consistency-regularised training."""

__version__ = "0.1.0"

from .augmentation import PerturbParams, StainDraw, augment, normalize_to_target
from .color_optics import load_png, od_to_rgb, rgb_to_od, save_png, tissue_mask
from .consistency_trainer import ModelParams, TrainConfig, train, train_step
from .stain_estimation import (
    SnmfConfig,
    StainMatrix,
    canonical_stain_order,
    estimate_macenko,
    estimate_vahadane,
    solve_concentrations,
    sparse_nmf,
)

__all__ = [
    "ModelParams",
    "PerturbParams",
    "SnmfConfig",
    "StainDraw",
    "StainMatrix",
    "TrainConfig",
    "augment",
    "canonical_stain_order",
    "estimate_macenko",
    "estimate_vahadane",
    "load_png",
    "normalize_to_target",
    "od_to_rgb",
    "rgb_to_od",
    "save_png",
    "solve_concentrations",
    "sparse_nmf",
    "tissue_mask",
    "train",
    "train_step",
]
