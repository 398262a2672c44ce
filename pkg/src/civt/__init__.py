"""Cross-inductive-bias distillation on a small deterministic tensor engine.

A three-token vision transformer student is co-advised by two frozen
teachers with different inductive biases -- a residual conv net and an
involution net -- each supervising its own token, while the class token
keeps the hard labels.  Everything runs on a numpy-backed reverse-mode
autodiff core built for auditability: finite-difference gradient checks,
bit-level invariance tests, and byte-identical reruns.
"""

from .checkpoint import load_model, load_tensors, save_model, save_tensors
from .config import RunConfig, format_config, parse_config, read_config
from .data import Dataset, Example, SynthSpec, load_cifar10, synth_generate
from .distill import (
    DistillConfig,
    civt_loss,
    cross_entropy,
    kd_kl,
    kl_similarity,
    naive_multi_loss,
)
from .errors import (
    CivtError,
    ConfigError,
    DataFormatError,
    NumericsError,
    ShapeError,
)
from .estimators import CivtClassifier, TeacherClassifier
from .gradcheck import GradCheckReport, check_gradients
from .models import (
    ModelSpec,
    TokenLogits,
    build,
    forward_civt,
    forward_mixer,
    forward_teacher,
    param_count,
    predict,
)
from .optim import AdamW, OptimState, Schedule, adamw_step, lr_at
from .tensor import (
    Tensor,
    concat,
    debug_nan_checks,
    exact_reductions,
    no_grad,
    softmax_rows,
)
from .train import TrainResult, evaluate, train_run

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CivtClassifier", "CivtError", "ConfigError", "DataFormatError",
    "Dataset", "DistillConfig", "Example", "GradCheckReport", "ModelSpec",
    "NumericsError", "OptimState", "RunConfig", "Schedule", "ShapeError",
    "SynthSpec", "Tensor", "TeacherClassifier", "TokenLogits", "TrainResult",
    "adamw_step", "build", "check_gradients", "civt_loss", "concat",
    "cross_entropy", "debug_nan_checks", "evaluate", "exact_reductions",
    "format_config", "forward_civt", "forward_mixer", "forward_teacher",
    "kd_kl", "kl_similarity", "load_cifar10", "load_model", "load_tensors",
    "lr_at", "naive_multi_loss", "no_grad", "param_count", "parse_config",
    "predict", "read_config", "save_model", "save_tensors", "softmax_rows",
    "synth_generate", "train_run",
]
