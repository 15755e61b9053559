"""Transferable adversarial examples via gradient norm penalty, on a desk-scale model zoo."""
__version__ = "0.1.0"

from .attacks import (AdversarialBatch, AttackConfig, GradientTransform, dim_transform, fgsm, gnp_gradient,
                      ifgsm, mifgsm, project_clip, run_attack, tim_smooth)
from .data import Dataset, load_idx, save_idx, select_correctly_classified, synth_dataset
from .harness import AblationGrid, TransferReport, ablate, asr, compare, evaluate_transfer
from .landscape import FlatnessProbe, gradient_norm_at, loss_slice, sharpness
from .nn import LossValueAndGrad, Model, check_gradient, forward, loss_and_input_gradient
from .zoo import ArchSpec, TrainConfig, build, default_zoo_specs, load, save, train

__all__ = [
    "AblationGrid", "AdversarialBatch", "ArchSpec", "AttackConfig", "Dataset", "FlatnessProbe",
    "GradientTransform", "LossValueAndGrad", "Model", "TrainConfig", "TransferReport", "ablate", "asr",
    "build", "check_gradient", "compare", "default_zoo_specs", "dim_transform", "evaluate_transfer", "fgsm",
    "forward", "gnp_gradient", "gradient_norm_at", "ifgsm", "load", "load_idx", "loss_and_input_gradient",
    "loss_slice", "mifgsm", "project_clip", "run_attack", "save", "save_idx", "select_correctly_classified",
    "sharpness", "synth_dataset", "tim_smooth", "train",
]
