"""Out-of-distribution robust 3D segmentation across acquisition environments."""

__version__ = "0.1.0"

from .estimator import OODSegmenter
from .evaluation import FoldResult, MethodReport, aggregate, dice_score, domain_accuracy, emit_table
from .network import ArchConfig, TwoHeadUNet, init_model
from .splits import SplitPlan, make_folds, restrict_segmentor, verify_plan
from .synthgen import EnvSpec, default_env_suite, generate_suite
from .trainer import TrainConfig, TrainState, train

__all__ = [
    "ArchConfig", "EnvSpec", "FoldResult", "MethodReport", "OODSegmenter", "SplitPlan",
    "TrainConfig", "TrainState", "TwoHeadUNet", "aggregate", "default_env_suite", "dice_score",
    "domain_accuracy", "emit_table", "generate_suite", "init_model", "make_folds",
    "restrict_segmentor", "train", "verify_plan",
]
