"""Guided proposals: sampling with the backward-filtered proxy as a guide.

This is the plain numpy sampler (no learned residual training).  Random
numbers for vertex ``v`` and replicate ``k`` come from the substream
``default_rng([seed, v, k])`` so any subset of edges can be re-simulated
with exactly the same noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .filtering import FilterResult, MessageGrid
from .gaussian import InfoGaussian, MomentGaussian, cholesky, spd_inverse
from .models import DiscreteKernel, SdeSpec, matvec
from .tree import Tree


@dataclass(frozen=True)
class EdgePath:
    times: np.ndarray
    states: np.ndarray
    noise: np.ndarray          # Wiener increments dW_i, shape (num_steps, d)
    kl: float = 0.0            # 1/2 sum |g|^2_Sigma dt (left point)
    ito: float = 0.0           # sum g' sigma dW


@dataclass
class TreeSample:
    vertex_state: dict[int, np.ndarray] = field(default_factory=dict)
    edge_path: dict[int, EdgePath] = field(default_factory=dict)
    innovations: dict[int, np.ndarray] = field(default_factory=dict)


def substream(seed: int, v: int, k: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(v), int(k)])


def guided_kernel_moments(x_parent, msg: InfoGaussian, kernel: DiscreteKernel) -> MomentGaussian:
    """Moments of the prior kernel reweighted by the child's message."""
    x_parent = np.asarray(x_parent, dtype=float)
    Sigma = kernel.cov_fn(x_parent)
    mu = kernel.mean_fn(x_parent)
    P = spd_inverse(Sigma)
    cov = spd_inverse(msg.H + P)
    return MomentGaussian(cov @ (msg.eta + P @ mu), cov)


def guided_drift(t: float, z, grid: MessageGrid, sde: SdeSpec) -> np.ndarray:
    i = grid.index_of(t)
    return _guided_drift_at(i, np.asarray(z, dtype=float), grid, sde)


def _guided_drift_at(i, z, grid, sde):
    score = grid.eta[i] - grid.H[i] @ z
    return sde.drift_fn(z) + matvec(sde.Sigma(z), score)


def simulate_guided_edge(x_parent, grid: MessageGrid, sde: SdeSpec, residual: Callable | None = None,
                         rng=None, *, noise=None) -> EdgePath:
    """Euler-Maruyama for the guided SDE on the message grid.

    ``noise`` (standard normals, shape (num_steps, d)) overrides ``rng``.
    ``residual(t, z)`` is added to the proxy score when given.
    """
    times = grid.times
    n = len(times) - 1
    d = grid.eta.shape[1]
    if noise is None:
        rng = np.random.default_rng(rng)
        noise = rng.standard_normal((n, d))
    noise = np.asarray(noise, dtype=float)
    dts = np.diff(times)
    dW = noise * np.sqrt(dts)[:, None]
    z = np.asarray(x_parent, dtype=float).copy()
    states = np.empty((n + 1, d))
    states[0] = z
    kl = 0.0
    ito = 0.0
    for i in range(n):
        g = grid.eta[i] - grid.H[i] @ z
        if residual is not None:
            g = g + residual(times[i], z)
        sig = sde.dispersion_fn(z)
        Sig = sig @ sig.T
        Sg = Sig @ g
        kl += 0.5 * float(g @ Sg) * dts[i]
        ito += float(g @ (sig @ dW[i]))
        z = z + (sde.drift_fn(z) + Sg) * dts[i] + sig @ dW[i]
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite state at step {i + 1}")
        states[i + 1] = z
    return EdgePath(times, states, dW, kl, ito)


def replay_increments(x_parent, path: EdgePath, grid: MessageGrid, sde: SdeSpec,
                      residual: Callable | None = None) -> np.ndarray:
    """Rebuild the states of ``path`` from its stored increments."""
    dts = np.diff(path.times)
    return simulate_guided_edge(x_parent, grid, sde, residual,
                                noise=path.noise / np.sqrt(dts)[:, None]).states


def _model_for(models, v):
    return models[v] if isinstance(models, Mapping) else models


def forward_guide(tree: Tree, filt: FilterResult, models, seed: int = 0, sample_idx: int = 0, *,
                  residuals: Mapping[int, Callable] | None = None,
                  flows: Mapping[int, Callable] | None = None,
                  noise: Mapping[int, np.ndarray] | None = None) -> TreeSample:
    """Pre-order sampling of one tree from the guided proposal.

    ``flows[v](x_tilde, x_parent)`` transforms a discrete-edge draw before
    it is passed on to the children.  ``noise`` supplies the standard-normal
    innovations per vertex instead of drawing them.
    """
    out = TreeSample()
    out.vertex_state[0] = np.asarray(tree.root_value, dtype=float)
    for v in tree.pre_order()[1:]:
        x_pa = out.vertex_state[tree.parent[v]]
        model = _model_for(models, v)
        dyn = tree.edge[v]
        if noise is not None:
            eps = np.asarray(noise[v], dtype=float)
        else:
            shape = (dyn.num_steps, tree.dim) if dyn.is_continuous else (tree.dim,)
            eps = substream(seed, v, sample_idx).standard_normal(shape)
        out.innovations[v] = eps
        if dyn.is_continuous:
            res = residuals.get(v) if residuals else None
            path = simulate_guided_edge(x_pa, filt.edge_grid[v], model, res, noise=eps)
            out.edge_path[v] = path
            out.vertex_state[v] = path.states[-1]
        else:
            mg = guided_kernel_moments(x_pa, filt.vertex_msg[v], model)
            x = mg.mean + cholesky(mg.cov) @ eps
            if flows and v in flows:
                x = flows[v](x, x_pa)
            out.vertex_state[v] = x
    return out


def dump_trajectories(samples, tree: Tree) -> str:
    """Columnar text: sample_idx, vertex_id, t, state...  Discrete vertices use t = 0."""
    import csv
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_idx", "vertex_id", "t"] + [f"x{i}" for i in range(tree.dim)])
    for k, s in enumerate(samples):
        w.writerow([k, 0, "0"] + [format(x, ".17g") for x in s.vertex_state[0]])
        for v in tree.pre_order()[1:]:
            if v in s.edge_path:
                p = s.edge_path[v]
                for t, z in zip(p.times[1:], p.states[1:]):
                    w.writerow([k, v, format(t, ".17g")] + [format(x, ".17g") for x in z])
            else:
                w.writerow([k, v, "0"] + [format(x, ".17g") for x in s.vertex_state[v]])
    return buf.getvalue()
