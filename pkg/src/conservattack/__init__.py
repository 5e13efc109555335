"""Statistics-preserving adversarial attacks on tabular binary classifiers."""

__version__ = "0.1.0"

from .attack import (AttackConfig, AttackResult, ConservAttack, RestrictionSpec, evaluate_attack,
                     generate_candidates, preset, run_attack, score_candidate)
from .data import Dataset, DonutConfig, RegionPartition, find_best_single_cut, generate_donut, load_csv, split
from .exceptions import ConfigError, ConservAttackError, DataError, ModelFormatError, NumericError
from .nn import MLPBinaryClassifier, MlpModel, TrainConfig, build, train
from .stats import StatsSnapshot, auroc, delta_fn, distance_correlation, fooling_ratio, jsd

__all__ = [
    "AttackConfig", "AttackResult", "ConfigError", "ConservAttack", "ConservAttackError", "DataError",
    "Dataset", "DonutConfig", "MLPBinaryClassifier", "MlpModel", "ModelFormatError", "NumericError",
    "RegionPartition", "RestrictionSpec", "StatsSnapshot", "TrainConfig", "auroc", "build",
    "delta_fn", "distance_correlation", "evaluate_attack", "find_best_single_cut", "fooling_ratio",
    "generate_candidates", "generate_donut", "jsd", "load_csv", "preset", "run_attack", "score_candidate",
    "split", "train",
]
