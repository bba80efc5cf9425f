"""Deterministic federated-learning simulator with prototype-margin
attentive aggregation, plus FedAvg / FedProx / Fairness baselines and
latent-space analysis instruments."""

from .agg import AttentionVector, DeviationVector, StrategyConfig
from .data import ClientDataset, FederatedDataset, PartitionSpec
from .engine import ClientReport, RoundState, SimConfig, run_round, run_simulation, train_centralized
from .metrics import RoundRecord
from .nn import Gradient, ModelSpec, ParamSet
from .proto import MarginVector, NormalizedPrototypeSet, PrototypeSet

__version__ = "0.1.0"

__all__ = [
    "AttentionVector",
    "ClientDataset",
    "ClientReport",
    "DeviationVector",
    "FederatedDataset",
    "Gradient",
    "MarginVector",
    "ModelSpec",
    "NormalizedPrototypeSet",
    "ParamSet",
    "PartitionSpec",
    "PrototypeSet",
    "RoundRecord",
    "RoundState",
    "SimConfig",
    "StrategyConfig",
    "run_round",
    "run_simulation",
    "train_centralized",
    "__version__",
]
