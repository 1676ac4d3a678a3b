"""One-shot 3D segmentation: registration-synthesized labels plus
reconstruction-guided feature distillation, with student-only inference.
"""

from .augment import RegistrationAugmenter
from .config import PipelineConfig, load_config
from .losses import (
    RegLossConfig,
    bending_energy,
    contrastive_loss,
    diffusion_regularizer,
    distillation_loss,
    hint_loss,
    local_cc_loss,
    mi_loss,
    reconstruction_loss,
    registration_loss,
    segmentation_loss,
)
from .metrics import EvalReport, dice_score, evaluate_cases, hd95
from .networks import RegistrationNetwork, RegNetConfig, ResidualUNet, UNetConfig
from .pipeline import run_ablation, run_pipeline, select_atlas
from .segment import DistillationSegmenter, infer_student, student_forward, teacher_forward
from .toy import ToySpec, generate_toy_dataset, write_toy_dataset
from .volume import AtlasPair, DisplacementField, LabelMap, SyntheticPair, Volume
from .warp import ncc_score, warp_labels, warp_volume

__version__ = "0.1.0"

__all__ = [
    "AtlasPair",
    "DisplacementField",
    "DistillationSegmenter",
    "EvalReport",
    "LabelMap",
    "PipelineConfig",
    "RegLossConfig",
    "RegNetConfig",
    "RegistrationAugmenter",
    "RegistrationNetwork",
    "ResidualUNet",
    "SyntheticPair",
    "ToySpec",
    "UNetConfig",
    "Volume",
    "bending_energy",
    "contrastive_loss",
    "dice_score",
    "diffusion_regularizer",
    "distillation_loss",
    "evaluate_cases",
    "generate_toy_dataset",
    "hd95",
    "hint_loss",
    "infer_student",
    "load_config",
    "local_cc_loss",
    "mi_loss",
    "ncc_score",
    "reconstruction_loss",
    "registration_loss",
    "run_ablation",
    "run_pipeline",
    "segmentation_loss",
    "select_atlas",
    "student_forward",
    "teacher_forward",
    "warp_labels",
    "warp_volume",
    "write_toy_dataset",
]
