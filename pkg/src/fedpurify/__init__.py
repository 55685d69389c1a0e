"""Federated-learning backdoor defense simulation framework.

Implements the full loop: non-IID data partitioning, client local training,
backdoor attacks, pre-aggregation update filtering, weighted aggregation,
teacher-guided post-aggregation purification, and MA/ASR evaluation.
"""

__version__ = "0.1.0"

from fedpurify.models import ModelParams, build_model, flatten_params, unflatten_params
from fedpurify.attacks import TriggerSpec, apply_trigger, poison_client_data
from fedpurify.filtering import FilterResult, MajorityClusterFilter, filter_updates
from fedpurify.federation import aggregate, local_train, run_experiment
from fedpurify.config import ExperimentConfig, load_config

__all__ = [
    "ModelParams",
    "build_model",
    "flatten_params",
    "unflatten_params",
    "TriggerSpec",
    "apply_trigger",
    "poison_client_data",
    "FilterResult",
    "MajorityClusterFilter",
    "filter_updates",
    "aggregate",
    "local_train",
    "run_experiment",
    "ExperimentConfig",
    "load_config",
    "__version__",
]
