"""Transformer ablation for medical image segmentation networks.

A small numpy autodiff core, a graph IR for segmentation architectures, an
ablation rewrite that swaps Transformer blocks for shape-preserving linear
operators, static parameter accounting, segmentation metrics and a desk-scale
k-fold training harness.
"""

from .ablation import AblationRewrite, CompatReport, ablate, param_ratio, plan, verify_compat
from .errors import (
    CompatError,
    ConfigError,
    GenerationError,
    NonFiniteError,
    ParseError,
    ShapeError,
    TrainingDivergence,
    TransablateError,
    UsageError,
    ValidationError,
)
from .harness import (
    ExperimentReport,
    SyntheticDatasetConfig,
    TrainConfig,
    emit_report,
    gen_dataset,
    kfold_split,
    run_experiment,
    train,
)
from .ir import ArchGraph, BlockNode, build_graph, count_params, deserialize, execute, infer_shapes, serialize
from .metrics import LabelVolume, MetricResult, aggregate_folds, dice, extract_surface, surface_dice
from .tensor import RngStream, Tensor, backward, grad_check

__version__ = "0.1.0"
