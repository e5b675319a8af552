"""Desk-scale federated learning with feature normalization.

A numpy simulator for FedAVG and its feature-normalization relatives (FedFN,
FedFR, FedBABU, SphereFed), with non-IID partitioning, norm and representation
diagnostics, and per-client fine-tuning.
"""
from .data import (Dataset, Partition, gen_synthetic, make_partition, partition_iid, partition_lda,
                   partition_sharding)
from .diagnostics import FactorReport, NormReport, factor_report, norm_report
from .engine import Algorithm, FLConfig, RunResult, aggregate, local_train, lr_at_round, run_federated
from .errors import (ConfigError, DegenerateNormError, DimensionError, FedNormError, NumericError,
                     PartitionInfeasibleError)
from .model import HeadKind, HeadSpec, LossKind, LossSpec, ModelParams, init_model
from .pfl import PersonalResult, PFLReport, fine_tune, pfl_evaluate

__version__ = "0.1.0"

__all__ = [
    "Algorithm", "ConfigError", "Dataset", "DegenerateNormError", "DimensionError", "FLConfig",
    "FactorReport", "FedNormError", "HeadKind", "HeadSpec", "LossKind", "LossSpec", "ModelParams",
    "NormReport", "NumericError", "PFLReport", "Partition", "PartitionInfeasibleError", "PersonalResult",
    "RunResult", "aggregate", "factor_report", "fine_tune", "gen_synthetic", "init_model", "local_train",
    "lr_at_round", "make_partition", "norm_report", "partition_iid", "partition_lda", "partition_sharding",
    "pfl_evaluate", "run_federated",
]
