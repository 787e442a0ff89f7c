"""Federated-learning simulation harness with client unlearning.

Trains a small dense network with FedAvg while one client poisons its
shard with a backdoor, removes that client by subtracting its recorded
update history, repairs the damage with temperature distillation, and
evaluates every stage against a retrain-from-scratch baseline.
"""

__version__ = "0.1.0"

from .data import BackdoorSpec, Dataset, Example, Partition
from .errors import FedUnlearnError
from .federation import LocalTrainConfig, TrainingHistory, UpdateLedger
from .nn_core import Batch, LayerShape, ParameterVector
from .unlearning import DistillConfig, SkewRecord

__all__ = [
    "__version__",
    "BackdoorSpec",
    "Batch",
    "Dataset",
    "DistillConfig",
    "Example",
    "FedUnlearnError",
    "LayerShape",
    "LocalTrainConfig",
    "ParameterVector",
    "Partition",
    "SkewRecord",
    "TrainingHistory",
    "UpdateLedger",
]
