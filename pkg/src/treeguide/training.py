"""Variational training of neural residuals on top of the guided proposal.

The forward pass is written once for an arbitrary ancestor-closed vertex
subset: the whole tree gives the full negative ELBO and a root-to-leaf path
gives the subsampled estimator.  Noise for vertex ``v`` always comes from
``fold_in(key, v)``, so a path evaluation sees exactly the noise the full
tree would.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import jax
import jax.numpy as jnp
import numpy as np

from . import nn
from .filtering import FilterResult
from .models import DiscreteKernel, ObservationModel, SdeSpec, matvec
from .tree import SubsampleScheme, Tree, subsample_scheme_uniform

log = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2 * np.pi))


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    embed_dim: int | None = None
    time_embedding: nn.FourierEmbedding = nn.FourierEmbedding()
    score_hidden: tuple = (64, 64, 64, 64)
    flow_layers: int = 4
    flow_hidden: tuple | None = None
    # arithmetic of the score net inside the SDE loop; state, messages and KL stay float64
    compute_dtype: str = "float32"


@dataclass
class TrainConfig:
    mc_samples: int = 50
    iterations: int = 5000
    lr: float = 1e-3
    clip_norm: float | None = 1.0
    subsample: bool = False
    seed: int = 0
    window: int = 500
    divergence_threshold: float = 1e6
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class LossReport:
    total: float
    per_edge_kl: dict[int, float]
    leaf_loglik: dict[int, float]
    iteration: int = 0
    moving_average: float | None = None
    per_sample: np.ndarray | None = None


@dataclass
class TrainResult:
    params: dict
    adam: nn.AdamState
    losses: np.ndarray
    moving_average: np.ndarray
    wall_time: np.ndarray
    leaves: list = field(default_factory=list)

    def final_average(self, window: int = 500) -> float:
        return float(np.mean(self.losses[-window:]))


# -- batched linear algebra helpers --------------------------------------

def _tri_solve(L, b, *, lower=True, transpose=False):
    """Solve ``L x = b`` (or ``L' x = b``) for vector ``b`` with broadcasting."""
    shape = jnp.broadcast_shapes(L.shape[:-2], b.shape[:-1])
    L = jnp.broadcast_to(L, shape + L.shape[-2:])
    b = jnp.broadcast_to(b, shape + b.shape[-1:])
    out = jax.lax.linalg.triangular_solve(L, b[..., None], left_side=True, lower=lower,
                                          transpose_a=transpose)
    return out[..., 0]


def _chol_logdet(L):
    return jnp.sum(jnp.log(jnp.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


def _spd_inv(A):
    L = jnp.linalg.cholesky(A)
    eye = jnp.broadcast_to(jnp.eye(A.shape[-1]), A.shape)
    Linv = jax.lax.linalg.triangular_solve(L, eye, left_side=True, lower=True)
    return jnp.swapaxes(Linv, -1, -2) @ Linv


# -- single-edge terms ---------------------------------------------------

def discrete_edge_term(x_parent, H, eta, kernel: DiscreteKernel, eps, flow=None):
    """One guided draw through a discrete edge and its KL sample.

    ``flow(x_tilde)`` returns ``(x, log|det J|)``.  Returns
    ``(x, kl, x_tilde)`` with ``kl = log pi(x_tilde) - log p(x) - log|det J|``.
    """
    d = x_parent.shape[-1]
    Sigma = jnp.broadcast_to(kernel.cov_fn(x_parent), x_parent.shape + (d,))
    mu = kernel.mean_fn(x_parent)
    L_S = jnp.linalg.cholesky(Sigma)
    P = _spd_inv(Sigma)
    prec = H + P
    L = jnp.linalg.cholesky(prec)
    rhs = eta + matvec(P, mu)
    mean = _tri_solve(L, _tri_solve(L, rhs), transpose=True)
    x_tilde = mean + _tri_solve(L, eps, transpose=True)
    log_pi = -0.5 * jnp.sum(eps * eps, axis=-1) + _chol_logdet(L) - 0.5 * d * _LOG_2PI
    if flow is None:
        x, logdet = x_tilde, 0.0
    else:
        x, logdet = flow(x_tilde)
    w = _tri_solve(L_S, x - mu)
    log_p = -0.5 * jnp.sum(w * w, axis=-1) - _chol_logdet(L_S) - 0.5 * d * _LOG_2PI
    return x, log_pi - log_p - logdet, x_tilde


def continuous_edge_term(x_parent, H_grid, eta_grid, times, sde: SdeSpec, eps, score=None,
                         keep_path: bool = False, score_feats=None, unroll: int = 1):
    """Euler-Maruyama through one (or a batch of) continuous edges.

    ``H_grid``/``eta_grid``/``times`` carry the time axis first after any
    edge-batch axes: shapes ``(..., n+1, d, d)``, ``(..., n+1, d)``,
    ``(..., n+1)``.  ``eps`` has shape ``(..., mc, n, d)`` and ``x_parent``
    ``(..., mc, d)``.  ``score(t, z)`` gives the residual drift with ``t`` of
    shape ``(...,)``; when ``score_feats`` (shape ``(..., n, k)``) is given the
    call becomes ``score(feat_i, z)`` with the step's feature slice.  Returns ``(z_T, kl, path)`` with the left-point KL
    ``1/2 sum_i |g_i|^2_Sigma dt``.
    """
    dts = times[..., 1:] - times[..., :-1]
    n = eps.shape[-2]
    # scan axis first
    Hs = jnp.moveaxis(H_grid[..., :-1, :, :], -3, 0)
    etas = jnp.moveaxis(eta_grid[..., :-1, :], -2, 0)
    ts = jnp.moveaxis(times[..., :-1], -1, 0)
    dt_s = jnp.moveaxis(dts, -1, 0)
    noise = jnp.moveaxis(eps, -2, 0)
    feats = ts if score_feats is None else jnp.moveaxis(score_feats, -2, 0)

    def step(carry, xs):
        z, kl = carry
        H, eta, f, dt, e = xs
        g = eta[..., None, :] - matvec(H[..., None, :, :], z)
        if score is not None:
            g = g + score(f, z)
        sig = sde.dispersion_fn(z)
        Sig = sig @ jnp.swapaxes(sig, -1, -2)
        Sg = matvec(Sig, g)
        dtb = dt[..., None]
        kl = kl + 0.5 * jnp.sum(g * Sg, axis=-1) * dtb
        dW = e * jnp.sqrt(dtb)[..., None]
        z = z + (sde.drift_fn(z) + Sg) * dtb[..., None] + matvec(sig, dW)
        return (z, kl), (z if keep_path else None)

    kl0 = jnp.zeros(x_parent.shape[:-1])
    (z, kl), path = jax.lax.scan(step, (x_parent, kl0), (Hs, etas, feats, dt_s, noise), length=n,
                                 unroll=unroll)
    if keep_path:
        path = jnp.concatenate([x_parent[None], path], axis=0)
        path = jnp.moveaxis(path, 0, -2)
    return z, kl, path


# -- the model -----------------------------------------------------------

def _model_for(models, v):
    return models[v] if isinstance(models, Mapping) else models


class VariationalTree:
    """Guided proposal plus shared neural residuals on a fixed tree."""

    def __init__(self, tree: Tree, filt: FilterResult, models, obs: ObservationModel,
                 net: NetConfig = NetConfig(), unroll: int = 2):
        self.unroll = unroll
        self.tree = tree
        self.filt = filt
        self.models = models
        self.obs = obs
        self.net = net
        self.dim = tree.dim
        self.embed_dim = net.embed_dim or nn.embedding_dim_for(tree.size)
        obs_y = tree.require_observations()
        self._root = jnp.asarray(tree.root_value)
        self.has_discrete = any(not e.is_continuous for e in tree.edge.values())
        self.has_continuous = any(e.is_continuous for e in tree.edge.values())
        self._Y = np.zeros((tree.size, tree.dim))
        for l in tree.leaves:
            self._Y[l] = obs_y[l]
        self._compiled: dict = {}
        self._stacks: dict = {}

    # -- parameters ------------------------------------------------------
    def init_params(self, seed: int = 0) -> dict:
        key = jax.random.PRNGKey(seed)
        k_emb, k_flow, k_score = jax.random.split(key, 3)
        params = {"embed": jax.random.normal(k_emb, (self.tree.size, self.embed_dim))}
        if self.has_discrete:
            params.update(nn.init_flow(k_flow, "flow", self.dim, self.embed_dim + self.dim,
                                       self.net.flow_layers, self.net.flow_hidden))
        if self.has_continuous:
            params.update(nn.init_score_net(k_score, "score", self.dim, self.net.time_embedding.dim,
                                            self.embed_dim, self.net.score_hidden))
        return params

    # -- structure -------------------------------------------------------
    def _groups(self, vertices):
        """Edges of an ancestor-closed subset grouped by depth, kind, grid size and model."""
        vs = set(vertices)
        groups = []
        for level in self.tree.levels():
            level = [v for v in level if v in vs]
            buckets: dict = {}
            for v in level:
                dyn = self.tree.edge[v]
                k = (dyn.is_continuous, dyn.num_steps, id(_model_for(self.models, v)))
                buckets.setdefault(k, []).append(v)
            for (cont, _, _), members in buckets.items():
                groups.append((cont, tuple(members)))
        return groups

    def _noise(self, key, idx, shape):
        return jax.vmap(lambda v: jax.random.normal(jax.random.fold_in(key, v), shape))(jnp.asarray(idx))

    def _stack(self, vs):
        """Per-group constants (numpy), cached by vertex tuple."""
        if vs not in self._stacks:
            if self.tree.edge[vs[0]].is_continuous:
                g = [self.filt.edge_grid[v] for v in vs]
                self._stacks[vs] = (np.stack([x.H for x in g]), np.stack([x.eta for x in g]),
                                    np.stack([x.times for x in g]),
                                    np.stack([self.filt.vertex_msg[v].mean() for v in vs]))
            else:
                m = [self.filt.vertex_msg[v] for v in vs]
                self._stacks[vs] = (np.stack([x.H for x in m]), np.stack([x.eta for x in m]))
        return self._stacks[vs]

    def _forward(self, params, key, vertices, mc, use_residual=True, keep_paths=False):
        """Simulate the subset; returns ``(X (V, mc, d), KL (V, mc), leaves, LL (L, mc), paths)``."""
        V, d = self.tree.size, self.dim
        X = jnp.zeros((V, mc, d)).at[0].set(jnp.broadcast_to(self._root, (mc, d)))
        KL = jnp.zeros((V, mc))
        paths = {}
        for cont, vs in self._groups(vertices):
            idx = np.array(vs)
            model = _model_for(self.models, vs[0])
            xp = X[np.array([self.tree.parent[v] for v in vs])]
            c_v = params["embed"][idx][:, None, :]
            if cont:
                n = self.tree.edge[vs[0]].num_steps
                eps = self._noise(key, idx, (mc, n, d))
                Hs, etas, times, mu_t = self._stack(vs)
                score, feats = None, None
                if use_residual:
                    emb = self.net.time_embedding
                    dt_ = jnp.dtype(self.net.compute_dtype)
                    sp = {k: v.astype(dt_) for k, v in params.items() if k.startswith("score/")}
                    c_t = nn.fourier_embed(jnp.asarray(times[:, :-1]), emb)       # (g, n, k)
                    c_T = nn.fourier_embed(jnp.asarray(times[:, -1]), emb)[:, None, :]
                    W_z, pre = nn.score_split(sp, "score", emb.dim, d, c_t.astype(dt_),
                                              jnp.asarray(mu_t, dtype=dt_)[:, None, :], c_T.astype(dt_),
                                              c_v.astype(dt_))
                    feats = pre                                                    # (g, n, hidden)

                    def score(f, z, W_z=W_z, sp=sp, dt_=dt_):
                        out = nn.score_tail(sp, "score", z.astype(dt_) @ W_z + f[:, None, :])
                        return out.astype(z.dtype)
                x, k, path = continuous_edge_term(xp, jnp.asarray(Hs), jnp.asarray(etas), jnp.asarray(times),
                                                  model, eps, score, keep_paths, feats, self.unroll)
                if keep_paths:
                    for i, v in enumerate(vs):
                        paths[v] = path[i]
            else:
                eps = self._noise(key, idx, (mc, d))
                H, eta = self._stack(vs)
                flow = None
                if use_residual:
                    context = jnp.concatenate([jnp.broadcast_to(c_v, (len(vs), mc, self.embed_dim)), xp], -1)

                    def flow(xt, context=context):
                        return nn.flow_forward(params, "flow", xt, context)
                x, k, _ = discrete_edge_term(xp, jnp.asarray(H)[:, None], jnp.asarray(eta)[:, None],
                                             model, eps, flow)
            X = X.at[idx].set(x)
            KL = KL.at[idx].set(k)
        sub = set(vertices)
        leaves = np.array([l for l in self.tree.leaves if l in sub], dtype=int)
        LL = self.obs.loglik(jnp.asarray(self._Y[leaves])[:, None, :], X[leaves])
        return X, KL, leaves, LL, paths

    def _objective(self, params, key, vertices, mc, edge_w, leaf_w, use_residual=True):
        _, KL, _, LL, _ = self._forward(params, key, vertices, mc, use_residual)
        total = jnp.asarray(edge_w) @ KL - jnp.asarray(leaf_w) @ LL
        return jnp.mean(total), (total, jnp.mean(KL, axis=1), jnp.mean(LL, axis=1))

    def _weights(self, leaf, scheme):
        """``(vertices, edge weights (V,), leaf weights (L,))`` for a full tree or one path."""
        edge_w = np.zeros(self.tree.size)
        if leaf is None:
            vertices = tuple(self.tree.nonroot)
            edge_w[list(vertices)] = 1.0
            return vertices, edge_w, np.ones(len(self.tree.leaves))
        vertices = tuple(self.tree.path_to_leaf(leaf))
        for v in vertices:
            edge_w[v] = 1.0 / scheme.omega[v]
        return vertices, edge_w, np.array([1.0 / scheme.gamma[leaf]])

    def _loss_fn(self, leaf, mc, use_residual, scheme):
        k = ("loss", leaf, mc, use_residual, id(scheme))
        if k not in self._compiled:
            vertices, ew, lw = self._weights(leaf, scheme)
            fn = jax.jit(lambda p, key: self._objective(p, key, vertices, mc, ew, lw, use_residual))
            self._compiled[k] = (vertices, fn)
        return self._compiled[k]

    def _report(self, vertices, out, iteration=0):
        loss, (per, kl, ll) = out
        kl = np.asarray(kl)
        ll = np.asarray(ll)
        sub = set(vertices)
        leaves = [l for l in self.tree.leaves if l in sub]
        return LossReport(float(loss), {int(v): float(kl[v]) for v in vertices},
                          {int(l): float(x) for l, x in zip(leaves, ll)}, iteration, None, np.asarray(per))

    # -- public losses ---------------------------------------------------
    def full_tree_loss(self, params, key, mc_samples: int = 50, *, use_residual: bool = True) -> LossReport:
        vertices, fn = self._loss_fn(None, mc_samples, use_residual, None)
        return self._report(vertices, fn(params, _as_key(key)))

    def path_loss(self, params, key, leaf: int, mc_samples: int = 50, scheme: SubsampleScheme | None = None,
                  *, use_residual: bool = True) -> LossReport:
        scheme = scheme or self.uniform_scheme
        vertices, fn = self._loss_fn(leaf, mc_samples, use_residual, scheme)
        return self._report(vertices, fn(params, _as_key(key)))

    @property
    def uniform_scheme(self) -> SubsampleScheme:
        if not hasattr(self, "_uniform"):
            self._uniform = subsample_scheme_uniform(self.tree)
        return self._uniform

    def sample(self, params, key, n: int, *, use_residual: bool = True, keep_paths: bool = True):
        """``n`` draws from the variational law: ``(states (n, V, d), {v: path (n, steps+1, d)})``."""
        if n == 0:
            return np.zeros((0, self.tree.size, self.dim)), {}
        key = _as_key(key)
        k = ("sample", n, use_residual, keep_paths)
        if k not in self._compiled:
            verts = tuple(self.tree.nonroot)
            self._compiled[k] = jax.jit(
                lambda p, kk: self._forward(p, kk, verts, n, use_residual, keep_paths))
        X, _, _, _, paths = self._compiled[k](params, key)
        states = np.swapaxes(np.asarray(X), 0, 1)
        return states, {int(v): np.asarray(p) for v, p in paths.items()}

    # -- training --------------------------------------------------------
    def _step_fn(self, leaf, mc, lr, clip, scheme):
        k = ("step", leaf, mc, lr, clip, id(scheme))
        if k not in self._compiled:
            vertices, ew, lw = self._weights(leaf, scheme)

            def step(params, m, v, count, key):
                (loss, aux), g = jax.value_and_grad(self._objective, has_aux=True)(
                    params, key, vertices, mc, ew, lw)
                finite = jnp.isfinite(loss) & jnp.all(jnp.array([jnp.all(jnp.isfinite(x)) for x in g.values()]))
                params, m, v = nn.adam_update(params, g, m, v, count, lr, clip)
                return params, m, v, loss, finite
            self._compiled[k] = jax.jit(step)
        return self._compiled[k]

    def train(self, config: TrainConfig, params: dict | None = None, adam: nn.AdamState | None = None,
              scheme: SubsampleScheme | None = None, progress: bool = False) -> TrainResult:
        params = params if params is not None else self.init_params(config.seed)
        adam = adam or nn.adam_init(params, config.lr, config.clip_norm)
        scheme = scheme or self.uniform_scheme
        leaves = list(scheme.gamma)
        probs = np.array([scheme.gamma[l] for l in leaves])
        leaf_rng = np.random.default_rng([config.seed, 7])
        base = jax.random.PRNGKey(config.seed)
        m, v = adam.m, adam.v
        losses = np.empty(config.iterations)
        ma = np.empty(config.iterations)
        walls = np.empty(config.iterations)
        chosen = []
        window = deque(maxlen=config.window)
        t0 = time.perf_counter()
        for it in range(config.iterations):
            leaf = None
            if config.subsample:
                leaf = leaves[int(leaf_rng.choice(len(leaves), p=probs))]
                chosen.append(leaf)
            fn = self._step_fn(leaf, config.mc_samples, adam.lr, adam.clip_norm, scheme if leaf is not None else None)
            key = jax.random.fold_in(base, adam.step + it)
            new_params, new_m, new_v, loss, finite = fn(params, m, v, adam.step + it + 1, key)
            loss = float(loss)
            if not bool(finite) or abs(loss) > config.divergence_threshold:
                if config.checkpoint_path:
                    nn.save_checkpoint(config.checkpoint_path, params,
                                       nn.AdamState(m, v, adam.step + it, adam.lr, adam.clip_norm),
                                       {"iteration": it, "diverged": True})
                raise TrainingDiverged(f"loss {loss} at iteration {it}")
            params, m, v = new_params, new_m, new_v
            losses[it] = loss
            window.append(loss)
            ma[it] = sum(window) / len(window)
            walls[it] = time.perf_counter() - t0
            if progress and (it % 500 == 0 or it == config.iterations - 1):
                log.info("iter %d loss %.6g avg %.6g", it, loss, ma[it])
            if config.checkpoint_every and config.checkpoint_path and (it + 1) % config.checkpoint_every == 0:
                nn.save_checkpoint(config.checkpoint_path, params,
                                   nn.AdamState(m, v, adam.step + it + 1, adam.lr, adam.clip_norm),
                                   {"iteration": it + 1})
        state = nn.AdamState(m, v, adam.step + config.iterations, adam.lr, adam.clip_norm)
        return TrainResult(params, state, losses, ma, walls, chosen)


def _as_key(key):
    if isinstance(key, (int, np.integer)):
        return jax.random.PRNGKey(int(key))
    return key


def moving_average(x, window: int = 500) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(len(x)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
