"""Geometry-preserving fine-tuning on a synthetic two-view manifold benchmark.

Submodules: ``linalg`` (numerical kernels), ``synthetic`` (benchmark
generator), ``charts`` (low-rank chart memory), ``objective`` (loss terms
and method presets), ``model`` (MLP, optimizers, training), ``metrics``
and ``experiment`` (batch runs and reports).
"""

from .charts import ChartAtlas, build_atlas
from .metrics import RunResult, evaluate_run
from .model import MlpModel, TrainConfig, finetune, train_teacher
from .objective import METHODS, ObjectiveConfig, total_loss
from .synthetic import BenchmarkConfig, make_benchmark

__version__ = "0.1.0"

__all__ = [
    "BenchmarkConfig",
    "ChartAtlas",
    "METHODS",
    "MlpModel",
    "ObjectiveConfig",
    "RunResult",
    "TrainConfig",
    "build_atlas",
    "evaluate_run",
    "finetune",
    "make_benchmark",
    "total_loss",
    "train_teacher",
]
