"""Dynamic mixtures of factor analysers fitted with a telescoping Gibbs sampler."""

__version__ = "0.1.0"

from .exceptions import ConfigError, DataError, DomainError, MF2AError, NumericalError, PostprocessError
from .model import ClusterParams, Dataset, DrawRecord, Hyperparams, MixtureState, validate
from .sampler import ChainConfig, MhDiagnostics, gibbs_sweep, init_state, run_chain
from .postprocess import IdentifiedPosterior, identify
from .simulate import SimTruth, gen_study1, gen_study2, standardize
from .evaluate import adjusted_rand_index, misclassification_rate, mse_omega
