"""Survival prediction from whole-slide patch features.

Quantile patch selection, graph-guided clustering, intra/inter-cluster
attention and a two-expert Gaussian mixture density head, trained with a
censored likelihood on a small numpy autodiff engine.
"""

__version__ = "0.1.0"

from .data import SlideBag, SynthConfig, generate_synthetic_cohort, kfold_splits, load_cohort, load_slide
from .model import SlideSurvivalModel, TrainConfig

__all__ = ["SlideBag", "SlideSurvivalModel", "SynthConfig", "TrainConfig", "generate_synthetic_cohort",
           "kfold_splits", "load_cohort", "load_slide"]
