"""Cell-type prototype network for expression prediction from patch features."""

from .deconv import NBDeconvolver, deconvolve
from .estimators import CPNNPatchRegressor, CPNNRegressor
from .metrics import evaluate, pearson, spearman
from .prototype import PrototypeEstimator, fit_prototypes
from .synth import SynthConfig, generate
from .training import TrainConfig, run_cv, train_patch, train_slide

__version__ = "0.1.0"

__all__ = [
    "CPNNPatchRegressor",
    "CPNNRegressor",
    "NBDeconvolver",
    "PrototypeEstimator",
    "SynthConfig",
    "TrainConfig",
    "deconvolve",
    "evaluate",
    "fit_prototypes",
    "generate",
    "pearson",
    "run_cv",
    "spearman",
    "train_patch",
    "train_slide",
]
