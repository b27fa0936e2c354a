"""Dataset-aware mixture-of-experts routing, losses, and training harness."""

from .autodiff import Tensor, finite_diff_check, normal_cdf, reverse_grad
from .config import RunConfig, default_config, load_config, parse_config, resolved_text
from .data import (
    PRESETS,
    DatasetSpec,
    Token,
    TokenBatch,
    generate_mixture,
    preset_specs,
    read_tokens_csv,
    write_tokens_csv,
)
from .dispatch import DROPPED, DispatchPlan, ExpertSet, RoutingConfig, build_plan, moe_forward
from .errors import (
    ConfigError,
    DegenerateBatchError,
    EvaluationError,
    GraphError,
    MappingError,
    ParameterError,
    ShapeError,
    TrainingDiverged,
)
from .estimator import DamexClassifier
from .gating import GateOutput, RouterParams, gate, select_top_k
from .gradcheck import CheckResult, run_gradcheck
from .heatmap import utilization_svg, write_heatmap_svg
from .losses import (
    LossBundle,
    LossConfig,
    damex_loss,
    importance_loss,
    load_balancing_loss,
    load_loss,
    task_cross_entropy,
    total_loss,
)
from .mapping import MappingTable, parse_mapping, target_distribution
from .model import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    ModelConfig,
    MoeModel,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    BatchSampler,
    EvalReport,
    RunMetrics,
    RunResult,
    collapse_score,
    evaluate,
    routing_purity,
    train_run,
    utilization_matrix,
    write_metrics_csv,
)

__all__ = [
    "Tensor",
    "finite_diff_check",
    "normal_cdf",
    "reverse_grad",
    "RunConfig",
    "default_config",
    "load_config",
    "parse_config",
    "resolved_text",
    "PRESETS",
    "DatasetSpec",
    "Token",
    "TokenBatch",
    "generate_mixture",
    "preset_specs",
    "read_tokens_csv",
    "write_tokens_csv",
    "DROPPED",
    "DispatchPlan",
    "ExpertSet",
    "RoutingConfig",
    "build_plan",
    "moe_forward",
    "ConfigError",
    "DegenerateBatchError",
    "EvaluationError",
    "GraphError",
    "MappingError",
    "ParameterError",
    "ShapeError",
    "TrainingDiverged",
    "DamexClassifier",
    "GateOutput",
    "RouterParams",
    "gate",
    "select_top_k",
    "CheckResult",
    "run_gradcheck",
    "utilization_svg",
    "write_heatmap_svg",
    "LossBundle",
    "LossConfig",
    "damex_loss",
    "importance_loss",
    "load_balancing_loss",
    "load_loss",
    "task_cross_entropy",
    "total_loss",
    "MappingTable",
    "parse_mapping",
    "target_distribution",
    "CHECKPOINT_MAGIC",
    "Checkpoint",
    "ModelConfig",
    "MoeModel",
    "load_checkpoint",
    "save_checkpoint",
    "BatchSampler",
    "EvalReport",
    "RunMetrics",
    "RunResult",
    "collapse_score",
    "evaluate",
    "routing_purity",
    "train_run",
    "utilization_matrix",
    "write_metrics_csv",
]

__version__ = "0.1.0"
