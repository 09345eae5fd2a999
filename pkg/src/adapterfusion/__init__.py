"""Adapters and AdapterFusion on a from-scratch float64 transformer.

The package bundles a reverse-mode autodiff engine, a small post-norm
encoder with masked-token pretraining, bottleneck adapters, the fusion
layer that mixes frozen adapters, synthetic tasks with controllable
relatedness, training pipelines, and a CLI for experiments.
"""

from .adapters import AdapterConfig, AdapterParams, adapter_forward, make_adapter, param_count
from .backbone import BackboneConfig, BackboneParams, PretrainConfig, encoder_forward, init_backbone, pretrain_mlm
from .config import ExperimentConfig, GridConfig, load_config
from .errors import AdapterFusionError
from .fusion import FusionParams, fusion_forward, fusion_init, fusion_regularizer
from .model import Assembly, evaluate
from .tasks import TaskSpec, generate_suite
from .training import TrainConfig, train_baseline, train_fusion, train_mt_adapters, train_st_adapter

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterFusionError",
    "AdapterParams",
    "Assembly",
    "BackboneConfig",
    "BackboneParams",
    "ExperimentConfig",
    "FusionParams",
    "GridConfig",
    "PretrainConfig",
    "TaskSpec",
    "TrainConfig",
    "adapter_forward",
    "encoder_forward",
    "evaluate",
    "fusion_forward",
    "fusion_init",
    "fusion_regularizer",
    "generate_suite",
    "init_backbone",
    "load_config",
    "make_adapter",
    "param_count",
    "pretrain_mlm",
    "train_baseline",
    "train_fusion",
    "train_mt_adapters",
    "train_st_adapter",
]
