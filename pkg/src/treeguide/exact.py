"""Exact belief propagation for linear-Gaussian trees.

Continuous linear edges are first discretized exactly (mean and covariance
ODEs), so the whole tree reduces to discrete linear kernels.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .filtering import FilterResult, backward_sweep, interval_transition
from .gaussian import MomentGaussian, spd_inverse, symmetrize
from .models import DiscreteKernel, LinearKernelSpec, LinearSdeSpec, ObservationModel, SdeSpec
from .tree import Tree


@dataclass(frozen=True)
class ExactPosterior:
    marginal: Mapping[int, MomentGaussian]
    transition: Mapping[int, tuple[np.ndarray, np.ndarray, np.ndarray]]
    log_evidence: float


def linear_sde_to_kernel(aux: LinearSdeSpec, T: float, num_steps: int) -> LinearKernelSpec:
    """Exact Gaussian transition of a linear SDE over ``[0, T]`` (RK5 on ``num_steps`` steps)."""
    d = aux.dim
    if T == 0:
        return LinearKernelSpec(np.eye(d), np.zeros(d), np.zeros((d, d)))
    return LinearKernelSpec(*interval_transition(aux, 0.0, T, num_steps))


def exact_kernels(tree: Tree, models) -> dict[int, LinearKernelSpec]:
    """Linear kernel of every edge; continuous edges are discretized exactly."""
    out = {}
    for v in tree.nonroot:
        m = models[v] if isinstance(models, Mapping) else models
        dyn = tree.edge[v]
        if isinstance(m, LinearKernelSpec):
            spec = m
        elif isinstance(m, LinearSdeSpec):
            spec = linear_sde_to_kernel(m, dyn.duration, dyn.num_steps)
        elif isinstance(m, (DiscreteKernel, SdeSpec)) and m.linear is not None:
            spec = m.linear if isinstance(m, DiscreteKernel) else \
                linear_sde_to_kernel(m.linear, dyn.duration, dyn.num_steps)
        else:
            raise TypeError(f"edge {v} has a nonlinear model; no exact smoother")
        out[v] = spec
    return out


def _as_discrete(tree: Tree) -> Tree:
    from .tree import EdgeDynamics, build_tree
    if not any(e.is_continuous for e in tree.edge.values()):
        return tree
    edges = [(tree.parent[v], v, EdgeDynamics.discrete()) for v in tree.nonroot]
    return build_tree(edges, tree.root_value, tree.observations)


def exact_backward_with_evidence(tree: Tree, kernels: Mapping[int, LinearKernelSpec],
                                 obs: ObservationModel) -> FilterResult:
    """Backward pass carrying log-normalizers, so ``log_h_root(x0)`` is the evidence."""
    return backward_sweep(_as_discrete(tree), kernels, obs, track_log_c=True)


def exact_marginals(tree: Tree, kernels: Mapping[int, LinearKernelSpec], obs: ObservationModel) -> ExactPosterior:
    filt = exact_backward_with_evidence(tree, kernels, obs)
    d = tree.dim
    marg = {0: MomentGaussian(tree.root_value.copy(), np.zeros((d, d)))}
    trans = {}
    for v in tree.pre_order()[1:]:
        k = kernels[v]
        msg = filt.vertex_msg[v]
        P = spd_inverse(k.Sigma_tilde)
        S = spd_inverse(msg.H + P)
        A = S @ P @ k.B
        a = S @ (msg.eta + P @ k.beta)
        trans[v] = (A, a, S)
        mp = marg[tree.parent[v]]
        marg[v] = MomentGaussian(A @ mp.mean + a, symmetrize(A @ mp.cov @ A.T + S))
    return ExactPosterior(marg, trans, filt.log_h_root(tree.root_value))


def loss_lower_bound(tree: Tree, kernels: Mapping[int, LinearKernelSpec], obs: ObservationModel) -> float:
    """``-log h_0(x_0)``: the smallest attainable negative ELBO."""
    return -exact_backward_with_evidence(tree, kernels, obs).log_h_root(tree.root_value)


def dump_marginals(post: ExactPosterior) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = post.marginal[0].mean.shape[0]
    iu = np.triu_indices(d)
    w.writerow(["vertex"] + [f"mean_{i}" for i in range(d)] + [f"cov_{i}_{j}" for i, j in zip(*iu)])
    for v in sorted(post.marginal):
        m = post.marginal[v]
        w.writerow([v] + [format(x, ".17g") for x in m.mean] + [format(x, ".17g") for x in m.cov[iu]])
    return buf.getvalue()
