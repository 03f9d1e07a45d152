"""pCN MCMC on the standard-normal innovations driving the raw guided proposal.

The chain state is the collection of innovations of every edge (Wiener
increments divided by sqrt(dt) on continuous edges, the reparameterization
noise on discrete edges).  The prior on these is N(0, I), which the pCN
proposal preserves, so only the importance weight enters the acceptance.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .filtering import FilterResult
from .gaussian import gaussian_logpdf
from .guiding import TreeSample, forward_guide, guided_kernel_moments
from .models import ObservationModel
from .tree import Tree


@dataclass
class ChainState:
    increments: dict[int, np.ndarray]
    log_weight: float
    accepted_count: int = 0
    proposed_count: int = 0
    sample: TreeSample | None = None

    @property
    def acceptance_rate(self) -> float:
        return self.accepted_count / self.proposed_count if self.proposed_count else float("nan")


@dataclass
class ChainResult:
    states: np.ndarray                     # (kept, V, d)
    log_weights: np.ndarray
    acceptance_rate: float
    kept_steps: list[int] = field(default_factory=list)
    samples: list[TreeSample] = field(default_factory=list)
    final: ChainState | None = None


def _model_for(models, v):
    return models[v] if isinstance(models, Mapping) else models


def _log_weight(tree: Tree, filt: FilterResult, models, obs: ObservationModel, sample: TreeSample) -> float:
    y = tree.require_observations()
    lw = sum(float(obs.loglik(y[l], sample.vertex_state[l])) for l in tree.leaves)
    for v in tree.nonroot:
        if v in sample.edge_path:
            p = sample.edge_path[v]
            lw -= p.ito + p.kl
        else:
            x_pa = sample.vertex_state[tree.parent[v]]
            x = sample.vertex_state[v]
            kern = _model_for(models, v)
            lw += float(kern.logpdf(x, x_pa))
            lw -= float(gaussian_logpdf(x, guided_kernel_moments(x_pa, filt.vertex_msg[v], kern)))
    return lw


def path_log_weight(tree: Tree, filt: FilterResult, models, obs: ObservationModel,
                    increments: Mapping[int, np.ndarray]) -> float:
    """Log importance weight of the guided tree sample driven by ``increments``.

    Equals ``log(dP/dQ) + sum_l log l(y_l | X_l)`` up to the constant
    ``log h_0(x_0)``, discretized with the same sums as the trainer.
    """
    s = forward_guide(tree, filt, models, noise=increments)
    lw = _log_weight(tree, filt, models, obs, s)
    if not np.isfinite(lw):
        raise FloatingPointError("non-finite path log weight")
    return lw


def init_chain(tree: Tree, filt: FilterResult, models, obs: ObservationModel, rng,
               increments: Mapping[int, np.ndarray] | None = None) -> ChainState:
    rng = np.random.default_rng(rng)
    if increments is None:
        increments = {}
        for v in tree.pre_order()[1:]:
            dyn = tree.edge[v]
            shape = (dyn.num_steps, tree.dim) if dyn.is_continuous else (tree.dim,)
            increments[v] = rng.standard_normal(shape)
    increments = {v: np.asarray(w, dtype=float) for v, w in increments.items()}
    s = forward_guide(tree, filt, models, noise=increments)
    lw = _log_weight(tree, filt, models, obs, s)
    if not np.isfinite(lw):
        raise FloatingPointError("non-finite log weight at chain initialization")
    return ChainState(increments, lw, 0, 0, s)


def pcn_step(state: ChainState, rho: float, tree: Tree, filt: FilterResult, models,
             obs: ObservationModel, rng) -> ChainState:
    """One pCN move ``W' = sqrt(1 - rho^2) W + rho xi`` with Metropolis correction."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    c = np.sqrt(1.0 - rho * rho)
    prop = {v: c * w + rho * rng.standard_normal(w.shape) for v, w in state.increments.items()}
    log_u = np.log(rng.uniform())
    try:
        s = forward_guide(tree, filt, models, noise=prop)
        lw = _log_weight(tree, filt, models, obs, s)
    except (FloatingPointError, np.linalg.LinAlgError):
        lw = -np.inf
    accepted = np.isfinite(lw) and log_u < lw - state.log_weight
    if accepted:
        return ChainState(prop, lw, state.accepted_count + 1, state.proposed_count + 1, s)
    return ChainState(state.increments, state.log_weight, state.accepted_count,
                      state.proposed_count + 1, state.sample)


def run_chain(tree: Tree, filt: FilterResult, models, obs: ObservationModel, n_steps: int,
              rho: float = 0.1, seed: int = 0, *, burn_in: int = 0, thin: int = 1,
              init: ChainState | None = None, keep_paths: bool = False) -> ChainResult:
    rng = np.random.default_rng(seed)
    state = init or init_chain(tree, filt, models, obs, rng)
    kept, weights, steps, samples = [], [], [], []
    for it in range(1, n_steps + 1):
        state = pcn_step(state, rho, tree, filt, models, obs, rng)
        if it > burn_in and (it - burn_in) % thin == 0:
            kept.append(np.stack([state.sample.vertex_state[v] for v in range(tree.size)]))
            weights.append(state.log_weight)
            steps.append(it)
            if keep_paths:
                samples.append(state.sample)
    states = np.array(kept) if kept else np.zeros((0, tree.size, tree.dim))
    return ChainResult(states, np.array(weights), state.acceptance_rate, steps, samples, state)


def dump_chain_summary(results: list[ChainResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["chain", "acceptance_rate", "kept_samples"])
    for i, r in enumerate(results):
        w.writerow([i, format(r.acceptance_rate, ".17g"), len(r.states)])
    return buf.getvalue()


def dump_chain_states(result: ChainResult) -> str:
    """Thinned vertex states: step, vertex_id, state..."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = result.states.shape[-1]
    w.writerow(["step", "vertex_id"] + [f"x{i}" for i in range(d)])
    for step, st in zip(result.kept_steps, result.states):
        for v, x in enumerate(st):
            w.writerow([step, v] + [format(a, ".17g") for a in x])
    return buf.getvalue()


def mode_occupancy(values: np.ndarray, threshold: float = 0.0) -> float:
    """Fraction of samples above ``threshold`` (the positive well)."""
    values = np.asarray(values)
    return float(np.mean(values > threshold)) if values.size else float("nan")

