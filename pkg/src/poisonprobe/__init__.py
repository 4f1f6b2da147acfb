"""Detecting and removing poisoned decision regions in small image classifiers."""

__version__ = "0.1.0"

from .architecture import ArchitectureError, ArchitectureSpec, Conv, Dense, Dropout, MaxPool, SoftmaxHead
from .attacks import AttackSpec, TriggerSpec, apply_trigger, backdoor_poison, make_adversarial_testset, mislabel_poison
from .autodiff import forward, loss_gradients
from .data import Dataset, load_idx, save_idx, subsample, synth_generate
from .detection import DetectionConfig, DetectionReport, detect_label, detect_model, estimate_gamma, tune_lambda
from .mitigation import MitigationConfig, iterate_until_clean
from .models import ModelHandle, architecture, build_model, load_model, predict, save_model
from .training import TrainConfig, evaluate, train

__all__ = [
    "ArchitectureError", "ArchitectureSpec", "AttackSpec", "Conv", "Dataset", "Dense", "DetectionConfig",
    "DetectionReport", "Dropout", "MaxPool", "MitigationConfig", "ModelHandle", "SoftmaxHead", "TrainConfig",
    "TriggerSpec", "apply_trigger", "architecture", "backdoor_poison", "build_model", "detect_label",
    "detect_model", "estimate_gamma", "evaluate", "forward", "iterate_until_clean", "load_idx", "load_model",
    "loss_gradients", "make_adversarial_testset", "mislabel_poison", "predict", "save_idx", "save_model",
    "subsample", "synth_generate", "train", "tune_lambda",
]
