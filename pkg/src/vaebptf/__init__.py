"""Bayesian Poisson tensor factorization with MLP-encoded Gamma posteriors.

The main entry points are ``fit`` and ``posterior_mean_factors`` for the
autoencoded model, ``gibbs_fit`` for the conjugate Gibbs baseline, and the
``vaebptf`` command line.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .engine import FactorState, ModelConfig, TrainReport, elbo, fit, posterior_mean_factors, predict
from .errors import BPTFError, DataError, NumericalError, TensorFormatError
from .evaluation import ablate_reweighting, cross_validate, evaluate_means, holdout_ll, mae
from .gibbs import GibbsResult, gibbs_fit
from .synthetic import SyntheticTruth, compare_posteriors, generate
from .tensor_store import SparseCountTensor, load_tensor, save_tensor, train_test_split

__version__ = "0.1.0"

__all__ = [
    "BPTFError",
    "Checkpoint",
    "DataError",
    "FactorState",
    "GibbsResult",
    "ModelConfig",
    "NumericalError",
    "SparseCountTensor",
    "SyntheticTruth",
    "TensorFormatError",
    "TrainReport",
    "ablate_reweighting",
    "compare_posteriors",
    "cross_validate",
    "elbo",
    "evaluate_means",
    "fit",
    "generate",
    "gibbs_fit",
    "holdout_ll",
    "load_checkpoint",
    "load_tensor",
    "mae",
    "posterior_mean_factors",
    "predict",
    "save_checkpoint",
    "save_tensor",
    "train_test_split",
]
