"""Subject-conditioned low-rank adapters on a small numpy autodiff core."""

__version__ = "0.1.0"

from .datagen import Dataset, SyntheticSpec, gen_synthetic, read_dataset, write_dataset
from .errors import ConfigError, DimensionError, FormatError, InputError, NonFiniteError, UsageError
from .estimator import SubjectConditionedClassifier
from .harness import TrainConfig, compare, evaluate, finetune_new_subject, heldout_workflow, train
from .layers import UNKNOWN, SubjectConditionedConv2d, SubjectConditionedLinear
from .models import ModelConfig, build_model, count_params, load_model, predict, save_model

__all__ = [
    "ConfigError", "Dataset", "DimensionError", "FormatError", "InputError", "ModelConfig", "NonFiniteError",
    "SubjectConditionedClassifier", "SubjectConditionedConv2d", "SubjectConditionedLinear", "SyntheticSpec",
    "TrainConfig", "UNKNOWN", "UsageError", "build_model", "compare", "count_params", "evaluate",
    "finetune_new_subject", "gen_synthetic", "heldout_workflow", "load_model", "predict", "read_dataset",
    "save_model", "train", "write_dataset",
]
