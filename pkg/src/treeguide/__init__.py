"""Backward filtering and neural forward guiding on trees.

The numpy-level pieces (trees, Gaussian algebra, models, filtering, guided
sampling, exact smoothing, pCN) import eagerly.  Names backed by jax are
resolved on first access so that thread settings can be applied first.
"""

from .exact import ExactPosterior, exact_kernels, exact_marginals, linear_sde_to_kernel, loss_lower_bound
from .filtering import (FilterResult, MessageGrid, backward_sweep, fuse, leaf_init, pullback_continuous,
                        pullback_discrete)
from .gaussian import (InfoGaussian, MomentGaussian, gaussian_logpdf, info_to_moment, moment_to_info,
                       woodbury_pullback_core)
from .guiding import EdgePath, TreeSample, forward_guide, guided_drift, guided_kernel_moments, simulate_guided_edge
from .mcmc import ChainResult, ChainState, path_log_weight, pcn_step, run_chain
from .models import (DiscreteKernel, LinearKernelSpec, LinearSdeSpec, ObservationModel, SdeSpec,
                     brownian_aux, double_well_sde, kunita_sde, linear_gaussian_ar_kernel, observation_loglik,
                     ou_sde)
from .tree import (EdgeDynamics, SubsampleScheme, Tree, TreeError, augment_virtual_root, balanced_tree,
                   build_tree, random_tree, subsample_scheme_uniform)

_LAZY = {
    "NetConfig": "training", "TrainConfig": "training", "VariationalTree": "training",
    "LossReport": "training", "TrainResult": "training", "TrainingDiverged": "training",
    "build_experiment": "experiments", "Experiment": "experiments",
    "default_config": "config", "load_config": "config", "ExperimentConfig": "config",
}


def __getattr__(name):
    if name in _LAZY:
        import importlib
        return getattr(importlib.import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__version__ = "0.1.0"
