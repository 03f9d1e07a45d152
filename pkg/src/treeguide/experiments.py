"""Builders for the four reference scenarios and their helper data generators."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .config import ExperimentConfig
from .exact import ExactPosterior, exact_kernels, exact_marginals, loss_lower_bound
from .filtering import FilterResult, backward_sweep
from .models import (LinearKernelSpec, ObservationModel, SdeSpec, ar_alpha_for_depth, brownian_aux,
                     double_well_sde, kunita_aux, kunita_sde, linear_gaussian_ar_kernel, ou_sde)
from .nn import FourierEmbedding
from .training import NetConfig, TrainConfig, VariationalTree
from .tree import EdgeDynamics, Tree, augment_virtual_root, balanced_tree, build_tree, random_tree


@dataclass
class Experiment:
    config: ExperimentConfig
    tree: Tree
    models: object
    aux: object
    obs: ObservationModel
    linear: bool = False
    extra: dict = field(default_factory=dict)

    @cached_property
    def filter(self) -> FilterResult:
        return backward_sweep(self.tree, self.aux, self.obs)

    def lower_bound(self) -> float | None:
        if not self.linear:
            return None
        return loss_lower_bound(self.tree, exact_kernels(self.tree, self.models), self.obs)

    def exact_posterior(self) -> ExactPosterior | None:
        if not self.linear:
            return None
        return exact_marginals(self.tree, exact_kernels(self.tree, self.models), self.obs)

    def net_config(self) -> NetConfig:
        n = self.config.net
        return NetConfig(n.embed_dim, FourierEmbedding(n.time_embed_dim), tuple(n.score_hidden),
                         n.flow_layers, tuple(n.flow_hidden) if n.flow_hidden else None)

    def train_config(self, checkpoint_path: str | None = None) -> TrainConfig:
        t = self.config.train
        return TrainConfig(t.mc_samples, t.iterations, t.lr, t.clip_norm, t.subsample, self.config.seed,
                           t.window, t.divergence_threshold, t.checkpoint_every, checkpoint_path)

    @cached_property
    def variational(self) -> VariationalTree:
        return VariationalTree(self.tree, self.filter, self.models, self.obs, self.net_config())


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    return _BUILDERS[cfg.experiment](cfg)


# -- linear-Gaussian balanced tree ---------------------------------------

def _linear_gaussian(cfg: ExperimentConfig) -> Experiment:
    p = cfg.params
    d = p.dim
    alpha = ar_alpha_for_depth(p.depth, p.final_variance)
    tree = balanced_tree(p.depth, p.branch, EdgeDynamics.discrete(), np.zeros(d))
    tree = tree.with_observations({l: np.zeros(d) for l in tree.leaves})
    model = linear_gaussian_ar_kernel(alpha, d)
    if p.aux == "exact":
        aux = model.linear
    else:
        aux = LinearKernelSpec(np.eye(d), np.zeros(d), alpha * np.eye(d))
    return Experiment(cfg, tree, model, aux, ObservationModel.isotropic(p.obs_var, d), True,
                      {"alpha": alpha})


# -- OU on a random tree -------------------------------------------------

def simulate_prior(tree: Tree, sde: SdeSpec, rng) -> dict[int, np.ndarray]:
    """Unconditioned Euler-Maruyama simulation of every vertex state."""
    rng = np.random.default_rng(rng)
    X = {0: np.asarray(tree.root_value, dtype=float)}
    for v in tree.pre_order()[1:]:
        z = X[tree.parent[v]].copy()
        dyn = tree.edge[v]
        dt = dyn.duration / dyn.num_steps
        for _ in range(dyn.num_steps):
            z = z + sde.drift_fn(z) * dt + sde.dispersion_fn(z) @ rng.standard_normal(z.shape) * np.sqrt(dt)
        X[v] = z
    return X


def _ou_tree(cfg: ExperimentConfig) -> Experiment:
    p = cfg.params
    d = len(p.theta)
    root = np.zeros(d) if p.root is None else np.asarray(p.root, dtype=float)
    tree = random_tree(p.budget, p.branch_prob, p.tree_seed, dim=d, num_steps=p.num_steps, root_value=root)
    model = ou_sde(p.alpha, p.theta, p.sigma)
    obs = ObservationModel.isotropic(p.obs_var, d)
    rng = np.random.default_rng(p.data_seed)
    X = simulate_prior(tree, model, rng)
    L = np.linalg.cholesky(obs.Sigma_obs)
    y = {l: X[l] + L @ rng.standard_normal(d) for l in tree.leaves}
    tree = tree.with_observations(y)
    aux = model.linear if p.aux == "exact" else brownian_aux(p.sigma)
    return Experiment(cfg, tree, model, aux, obs, True, {"truth": X})


# -- double well ---------------------------------------------------------

def double_well_tree(y, internal_duration: float = 4.0, leaf_duration: float = 1.0, num_steps: int = 200,
                     root: float = 0.0) -> Tree:
    """Root -> two internal vertices (1, 2) -> two leaves each (3, 4 under 1; 5, 6 under 2)."""
    inner = EdgeDynamics.continuous(internal_duration, num_steps)
    outer = EdgeDynamics.continuous(leaf_duration, num_steps)
    edges = [(0, 1, inner), (0, 2, inner), (1, 3, outer), (1, 4, outer), (2, 5, outer), (2, 6, outer)]
    obs = {3 + i: np.array([float(v)]) for i, v in enumerate(y)}
    return build_tree(edges, np.array([root]), obs)


def _double_well(cfg: ExperimentConfig) -> Experiment:
    p = cfg.params
    tree = double_well_tree(p.y, p.internal_duration, p.leaf_duration, p.num_steps, p.root)
    model = double_well_sde(p.alpha, p.sigma)
    return Experiment(cfg, tree, model, brownian_aux(p.sigma), ObservationModel.isotropic(p.obs_var, 1))


def sign_pattern(states: np.ndarray, vertices=(1, 2)) -> np.ndarray:
    """Signs of selected scalar vertex states, shape (n, len(vertices))."""
    return np.sign(np.asarray(states)[:, list(vertices), 0])


# -- Kunita landmark shapes ----------------------------------------------

def ellipse_landmarks(n: int, a: float, b: float, angle: float = 0.0) -> np.ndarray:
    """``n`` points on an ellipse, counter-clockwise, flattened to shape (2n,)."""
    t = 2.0 * np.pi * np.arange(n) / n
    pts = np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
    c, s = np.cos(angle), np.sin(angle)
    return (pts @ np.array([[c, s], [-s, c]])).ravel()


def _orient(p, q, r):
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])


def segments_intersect(p1, p2, q1, q2) -> bool:
    """Proper or touching intersection of closed segments ``p1p2`` and ``q1q2``."""
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 != 0 and d3 * d4 != 0:
        return True

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
    return ((d1 == 0 and on_seg(q1, q2, p1)) or (d2 == 0 and on_seg(q1, q2, p2))
            or (d3 == 0 and on_seg(p1, p2, q1)) or (d4 == 0 and on_seg(p1, p2, q2)))


def polygon_self_intersects(shape) -> bool:
    """Check every pair of non-adjacent edges of the closed landmark polygon."""
    pts = np.asarray(shape, dtype=float).reshape(-1, 2)
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]):
                return True
    return False


def _kunita(cfg: ExperimentConfig) -> Experiment:
    p = cfg.params
    rng = np.random.default_rng(p.data_seed)
    n = p.num_landmarks
    durations = rng.uniform(0.2, 1.0, size=6)
    pairs = [(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)]
    # rescale so the longest root-to-leaf path has length 1
    path_len = [durations[0] + durations[2], durations[0] + durations[3],
                durations[1] + durations[4], durations[1] + durations[5]]
    durations = durations / max(path_len)
    edges = [(a, b, EdgeDynamics.continuous(float(T), p.num_steps)) for (a, b), T in zip(pairs, durations)]
    shapes = []
    for _ in range(4):
        ecc = np.clip(0.5 + p.eccentricity_noise * rng.standard_normal(), 0.1, 0.9)
        shapes.append(ellipse_landmarks(n, 1.0, 1.0 - ecc, angle=0.2 * rng.standard_normal()))
    scale = max(np.abs(s).max() for s in shapes)
    shapes = [s / scale for s in shapes]
    base = build_tree(edges, np.zeros(2 * n), {3 + i: s for i, s in enumerate(shapes)})
    virtual_value = np.mean(shapes, axis=0)
    vdyn = EdgeDynamics.continuous(float(np.mean(durations)), p.num_steps)
    tree = augment_virtual_root(base, virtual_value, vdyn)
    model = kunita_sde(p.alpha, p.sigma, n)
    aux = kunita_aux(p.alpha, p.sigma)
    obs = ObservationModel.isotropic(p.obs_std ** 2, 2 * n)
    return Experiment(cfg, tree, model, aux, obs, False, {"leaf_shapes": shapes})


_BUILDERS = {"linear_gaussian": _linear_gaussian, "ou_tree": _ou_tree,
             "double_well": _double_well, "kunita_shapes": _kunita}
