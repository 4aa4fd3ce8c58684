"""Pareto-weighted invariant representation learning for implicit-feedback recommendation."""

from .backbone import ItemGraph, LossWeights, ModelParams, TrainConfig
from .dataset import FeatureTable, InteractionSet, SplitSpec, SyntheticSpec
from .envid import EnvPartition
from .maskgen import MaskState
from .pareto import ParetoWeights, solve_weights
from .pipeline import RunConfig, run

__version__ = "0.1.0"
