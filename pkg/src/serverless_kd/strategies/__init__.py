from .aggregation import ConsensusLogits, EmptyInput, aggregate_logits, fedavg_weights
from .distill import DistillConfig, DistillResult, ensemble_distill, teacher_logits
from .feddf import feddf_round, feddf_setup
from .fedmd import fedmd_round, fedmd_transfer_learning
from .selection import ClientProfile, InvalidBeta, NotEnoughClients, select_clients, update_ema
from .state import ExperimentState, StrategyError, derive_seed, setup_experiment

__all__ = [
    "ClientProfile",
    "ConsensusLogits",
    "DistillConfig",
    "DistillResult",
    "EmptyInput",
    "ExperimentState",
    "InvalidBeta",
    "NotEnoughClients",
    "StrategyError",
    "aggregate_logits",
    "derive_seed",
    "ensemble_distill",
    "feddf_round",
    "feddf_setup",
    "fedavg_weights",
    "fedmd_round",
    "fedmd_transfer_learning",
    "select_clients",
    "setup_experiment",
    "teacher_logits",
    "update_ema",
]
