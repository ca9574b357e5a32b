"""Multilayer network embedding by symmetric CP factorization fit with estimating equations."""

from .covariance import WorkingCovariance, estimate_w_pooled
from .errors import TgineeError
from .estimator import FitConfig, FitReport, fit, fit_best, load_checkpoint, quadratic_loss, save_checkpoint, score
from .evaluation import Diagnostics, SplitSpec, auc, diagnostics, kruskal_check, split_triplets, suggest_rank
from .link_fn import LinkFunction
from .sampling import TripletBatch, iterate_batches, sample_negatives
from .synth import SynthSpec, generate, generate_heterogeneous, perturb, plant_cp_model
from .tensor_core import FactorPair, SparseMultiLayerGraph, read_edgelist, write_edgelist

__version__ = "0.1.0"

__all__ = [
    "Diagnostics",
    "FactorPair",
    "FitConfig",
    "FitReport",
    "LinkFunction",
    "SparseMultiLayerGraph",
    "SplitSpec",
    "SynthSpec",
    "TgineeError",
    "TripletBatch",
    "WorkingCovariance",
    "auc",
    "diagnostics",
    "estimate_w_pooled",
    "fit",
    "fit_best",
    "generate",
    "generate_heterogeneous",
    "iterate_batches",
    "kruskal_check",
    "load_checkpoint",
    "perturb",
    "plant_cp_model",
    "quadratic_loss",
    "read_edgelist",
    "sample_negatives",
    "save_checkpoint",
    "score",
    "split_triplets",
    "suggest_rank",
    "write_edgelist",
]
