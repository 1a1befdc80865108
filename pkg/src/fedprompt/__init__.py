"""Desk-scale federated class-incremental learning with prompt pools over a
frozen transformer: instance-wise prompt querying, frequency-sorted prompt
aggregation across non-iid clients, baselines, and a reproducible harness.
"""

from .autodiff import Tensor, backward, no_grad
from .config import ExperimentConfig
from .datagen import StreamSpec, generate_stream, partition_task
from .encoder import ClassifierHead, EncoderConfig, FrozenEncoder, init_head
from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    ProtocolError,
    RunComplete,
    ShapeError,
    TrainingDivergenceError,
)
from .experiment import run_ablation_suite, run_baseline, run_experiment
from .federation import (
    ClientRegistry,
    FederationConfig,
    GlobalState,
    LocalDelta,
    aggregate,
    run_round,
    sample_clients,
    sort_pool,
)
from .metrics import AccuracyMatrix, evaluate_tasks
from .prompts import PromptPool, init_pool, init_prompt_block, prepend
from .training import PromptModel, TrainConfig, local_update, make_logit_mask

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "ClassifierHead",
    "ClientRegistry",
    "ConfigError",
    "ContractError",
    "DegenerateInputError",
    "EncoderConfig",
    "ExperimentConfig",
    "FederationConfig",
    "FrozenEncoder",
    "GlobalState",
    "LocalDelta",
    "PromptModel",
    "PromptPool",
    "ProtocolError",
    "RunComplete",
    "ShapeError",
    "StreamSpec",
    "Tensor",
    "TrainConfig",
    "TrainingDivergenceError",
    "aggregate",
    "backward",
    "evaluate_tasks",
    "generate_stream",
    "init_head",
    "init_pool",
    "init_prompt_block",
    "local_update",
    "make_logit_mask",
    "no_grad",
    "partition_task",
    "prepend",
    "run_ablation_suite",
    "run_baseline",
    "run_experiment",
    "run_round",
    "sample_clients",
    "sort_pool",
    "__version__",
]
