"""Sparse relational transition models with deictic references."""
from .baseline import BaselineModel, eval_baseline, train_baseline
from .blocks import DOMAIN, SceneConfig, generate_dataset
from .em import EmConfig, EmResult, run_em
from .predictor import GaussianPredictor, TrainConfig, train_alternating
from .relational import Domain, Experience, RefStep, read_dataset, write_dataset
from .rules import SpareModel, TransitionRule, greedy_select, predict, sample_logliks, train_single

__all__ = [
    "BaselineModel", "DOMAIN", "Domain", "EmConfig", "EmResult", "Experience", "GaussianPredictor", "RefStep",
    "SceneConfig", "SpareModel", "TrainConfig", "TransitionRule", "eval_baseline", "generate_dataset",
    "greedy_select", "predict", "read_dataset", "run_em", "sample_logliks", "train_alternating",
    "train_baseline", "train_single", "write_dataset",
]
