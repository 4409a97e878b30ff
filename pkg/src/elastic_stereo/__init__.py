"""Elastic stereo-matching supernet: train once, extract subnets for any
latency budget without retraining."""

from .arch_space import (ArchConfig, InvalidConfigError, SearchSpace, count_architectures,
                         estimate_cost, sample_uniform, validate)
from .data import StereoSample, epe, generate_rds, make_dataset, read_pfm, write_pfm
from .deploy import ProfileRecord, pareto, profile, search_configs, select
from .estimator import ElasticStereoRegressor
from .loss import LossWeights, total_loss
from .network import ElasticStereoNet, StaticStereoNet, extract_subnet
from .trainer import OptimizerConfig, ShrinkSchedule, Trainer, train_full

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "InvalidConfigError", "SearchSpace", "count_architectures", "estimate_cost",
    "sample_uniform", "validate", "StereoSample", "epe", "generate_rds", "make_dataset",
    "read_pfm", "write_pfm", "ProfileRecord", "pareto", "profile", "search_configs", "select",
    "ElasticStereoRegressor", "LossWeights", "total_loss", "ElasticStereoNet", "StaticStereoNet",
    "extract_subnet", "OptimizerConfig", "ShrinkSchedule", "Trainer", "train_full",
]
