"""Illumination-identity disentanglement for person re-identification."""

from .datasets import ReIDData, load_dataset, make_toy_corpus, make_toy_datasets, write_dataset
from .estimator import IIDReID, IlluminationSynthesizer
from .evalkit import (
    EvalProtocol,
    cmc,
    distance_matrix,
    evaluate_retrieval,
    illumination_accuracy,
    intra_inter_distances,
    low_light_sweep,
    mean_average_precision,
    rank_gallery,
)
from .exceptions import CheckpointError, ConfigurationError, InvalidParameterError, MiningError
from .iidnet import IIDNet, ModelConfig
from .illumsynth import SynthesisSpec, gamma_adjust, luminance_stats
from .losses import LossConfig
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "EvalProtocol",
    "IIDNet",
    "IIDReID",
    "IlluminationSynthesizer",
    "InvalidParameterError",
    "LossConfig",
    "MiningError",
    "ModelConfig",
    "ReIDData",
    "SynthesisSpec",
    "TrainConfig",
    "cmc",
    "distance_matrix",
    "evaluate_retrieval",
    "gamma_adjust",
    "illumination_accuracy",
    "intra_inter_distances",
    "load_checkpoint",
    "load_dataset",
    "low_light_sweep",
    "luminance_stats",
    "make_toy_corpus",
    "make_toy_datasets",
    "mean_average_precision",
    "rank_gallery",
    "save_checkpoint",
    "train",
    "write_dataset",
]
