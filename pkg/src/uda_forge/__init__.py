"""Cross-modal knowledge distillation for unsupervised domain adaptation, with
residual sparse training for cheap multi-task deployment."""

from .bench import ExperimentConfig, SyntheticTaskSpec, evaluate, generate_task, reference_config, run_experiment
from .cmkd import CmkdConfig, objective, total_loss_step
from .errors import (
    ChecksumError,
    ConfigError,
    DivergenceError,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
    UdaForgeError,
)
from .model import AnchorTeacher, PrototypeTeacher, StudentModel, init_model
from .rst import RstConfig, SparseResidual, apply_residual, extract_residual, pack_residual, unpack_residual

__version__ = "0.1.0"
