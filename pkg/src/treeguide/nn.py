"""Small differentiable building blocks on jax.numpy (float64).

Parameters live in a flat ``dict[str, array]`` (a "param store") whose keys
are slash-separated names such as ``"flow/l0/scale/W1"``.  jax flattens
dicts in sorted key order, which fixes the iteration order.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

CHECKPOINT_VERSION = 1


# -- embeddings ----------------------------------------------------------

@dataclass(frozen=True)
class FourierEmbedding:
    dim: int = 32
    omega_min: float = 1e-3
    omega_max: float = 10.0

    def __post_init__(self):
        if self.dim % 2 or self.dim < 4:
            raise ValueError("Fourier embedding dimension must be even and >= 4")

    def frequencies(self) -> np.ndarray:
        half = self.dim // 2
        lo, hi = np.log10(self.omega_min), np.log10(self.omega_max)
        i = np.arange(half)
        return 2.0 * np.pi * 10.0 ** (lo + i / (half - 1) * (hi - lo))


def fourier_embed(x, emb: FourierEmbedding = FourierEmbedding()):
    """``[sin(w_0 x), ..., sin(w_k x), cos(w_0 x), ..., cos(w_k x)]`` along a new last axis."""
    w = jnp.asarray(emb.frequencies())
    arg = jnp.asarray(x)[..., None] * w
    return jnp.concatenate([jnp.sin(arg), jnp.cos(arg)], axis=-1)


def embedding_dim_for(num_vertices: int) -> int:
    return 16 if num_vertices < 100 else 64


# -- MLPs ----------------------------------------------------------------

def silu(x):
    return x * jax.nn.sigmoid(x)


def init_mlp(key, prefix: str, sizes, zero_last: bool = False) -> dict:
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    params = {}
    keys = jax.random.split(key, len(sizes) - 1)
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            W = jnp.zeros((n_in, n_out))
            b = jnp.zeros(n_out)
        else:
            bound = 1.0 / np.sqrt(max(n_in, 1))
            kw, kb = jax.random.split(keys[i])
            W = jax.random.uniform(kw, (n_in, n_out), minval=-bound, maxval=bound)
            b = jax.random.uniform(kb, (n_out,), minval=-bound, maxval=bound)
        params[f"{prefix}/W{i}"] = W
        params[f"{prefix}/b{i}"] = b
    return params


def mlp_layers(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}/W{n}" in params:
        n += 1
    return n


def mlp_apply(params: dict, prefix: str, x):
    n = mlp_layers(params, prefix)
    for i in range(n):
        x = x @ params[f"{prefix}/W{i}"] + params[f"{prefix}/b{i}"]
        if i < n - 1:
            x = silu(x)
    return x


# -- affine coupling flow ------------------------------------------------

def coupling_split(d: int, layer: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(conditioning indices, transformed indices) for a layer.

    Even layers transform the back half given the front ``d//2`` entries, odd
    layers the front ``d//2`` given the rest.  For ``d == 1`` every layer
    transforms the single coordinate from the context alone.
    """
    if d == 1:
        return (), (0,)
    h = d // 2
    front, back = tuple(range(h)), tuple(range(h, d))
    return (front, back) if layer % 2 == 0 else (back, front)


def init_flow(key, prefix: str, d: int, context_dim: int, num_layers: int = 4, hidden=None) -> dict:
    hidden = tuple(hidden) if hidden is not None else (4 * d, 4 * d)
    params = {}
    for k, lk in enumerate(jax.random.split(key, num_layers)):
        cond, trans = coupling_split(d, k)
        sizes = (len(cond) + context_dim,) + hidden + (len(trans),)
        ks, kt = jax.random.split(lk)
        params.update(init_mlp(ks, f"{prefix}/l{k}/scale", sizes, zero_last=True))
        params.update(init_mlp(kt, f"{prefix}/l{k}/trans", sizes, zero_last=True))
    return params


def flow_layers(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}/l{n}/scale/W0" in params:
        n += 1
    return n


def _conditioner(params, prefix, x, context, cond):
    inp = jnp.concatenate([x[..., list(cond)], context], axis=-1) if cond else context
    return mlp_apply(params, f"{prefix}/scale", inp), mlp_apply(params, f"{prefix}/trans", inp)


def coupling_forward(params: dict, prefix: str, layer: int, x, context):
    """One affine coupling layer; returns ``(y, log|det J|)``."""
    d = x.shape[-1]
    cond, trans = coupling_split(d, layer)
    scale, shift = _conditioner(params, f"{prefix}/l{layer}", x, context, cond)
    idx = jnp.array(trans)
    y = x.at[..., idx].set(x[..., idx] * jnp.exp(scale) + shift)
    return y, jnp.sum(scale, axis=-1)


def coupling_inverse(params: dict, prefix: str, layer: int, y, context):
    d = y.shape[-1]
    cond, trans = coupling_split(d, layer)
    # conditioning entries are untouched by the layer, so y carries them
    scale, shift = _conditioner(params, f"{prefix}/l{layer}", y, context, cond)
    idx = jnp.array(trans)
    x = y.at[..., idx].set((y[..., idx] - shift) * jnp.exp(-scale))
    return x, -jnp.sum(scale, axis=-1)


def flow_forward(params: dict, prefix: str, x, context):
    logdet = jnp.zeros(x.shape[:-1])
    for k in range(flow_layers(params, prefix)):
        x, ld = coupling_forward(params, prefix, k, x, context)
        logdet = logdet + ld
    return x, logdet


def flow_inverse(params: dict, prefix: str, y, context):
    logdet = jnp.zeros(y.shape[:-1])
    for k in reversed(range(flow_layers(params, prefix))):
        y, ld = coupling_inverse(params, prefix, k, y, context)
        logdet = logdet + ld
    return y, logdet


# -- score network -------------------------------------------------------

def init_score_net(key, prefix: str, d: int, time_dim: int, embed_dim: int, hidden=(64,) * 4) -> dict:
    sizes = (2 * time_dim + 2 * d + embed_dim,) + tuple(hidden) + (d,)
    return init_mlp(key, prefix, sizes, zero_last=True)


def score_apply(params: dict, prefix: str, c_t, z, mu_tilde, c_T, c_v):
    """Residual drift from ``[c_t, z, mu_tilde, c_T, c_v]`` (all broadcast to z's batch shape)."""
    batch = z.shape[:-1]
    parts = [jnp.broadcast_to(p, batch + p.shape[-1:]) for p in (c_t, z, mu_tilde, c_T, c_v)]
    return mlp_apply(params, prefix, jnp.concatenate(parts, axis=-1))


def score_split(params: dict, prefix: str, time_dim: int, d: int, c_t, mu_tilde, c_T, c_v):
    """Factor the first layer into a state part and a precomputed remainder.

    Returns ``(W_z, pre)`` with ``pre = c_t W_t + mu W_mu + c_T W_T + c_v W_v + b``
    broadcast over the inputs, so ``score_apply(...) == score_tail(z @ W_z + pre)``.
    """
    W0, b0 = params[f"{prefix}/W0"], params[f"{prefix}/b0"]
    o = np.cumsum([0, time_dim, d, d, time_dim])
    W_t, W_z, W_mu, W_T, W_v = W0[:o[1]], W0[o[1]:o[2]], W0[o[2]:o[3]], W0[o[3]:o[4]], W0[o[4]:]
    pre = c_t @ W_t + mu_tilde @ W_mu + c_T @ W_T + c_v @ W_v + b0
    return W_z, pre


def score_tail(params: dict, prefix: str, h0):
    """Remaining layers after the (pre-activation) first-layer output ``h0``."""
    n = mlp_layers(params, prefix)
    x = h0
    for i in range(1, n):
        x = silu(x) @ params[f"{prefix}/W{i}"] + params[f"{prefix}/b{i}"]
    return x if n > 1 else h0


# -- gradients and Adam --------------------------------------------------

def grad(loss_fn, params: dict, *args, **kwargs) -> dict:
    """Reverse-mode gradient of a scalar ``loss_fn(params, ...)``."""
    return jax.grad(loss_fn)(params, *args, **kwargs)


def global_norm(tree) -> jnp.ndarray:
    return jnp.sqrt(sum(jnp.sum(g * g) for g in jax.tree_util.tree_leaves(tree)))


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    clip_norm: float | None = 1.0
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    hyper: dict = field(default_factory=dict)


def adam_init(params: dict, lr: float = 1e-3, clip_norm: float | None = 1.0) -> AdamState:
    zeros = {k: jnp.zeros_like(v) for k, v in params.items()}
    return AdamState(dict(zeros), dict(zeros), 0, lr, clip_norm)


def clip_by_global_norm(grads: dict, clip_norm):
    if clip_norm is None:
        return grads
    norm = global_norm(grads)
    factor = jnp.minimum(1.0, clip_norm / jnp.maximum(norm, 1e-300))
    return {k: g * factor for k, g in grads.items()}


def adam_update(params, grads, m, v, step, lr, clip_norm, b1=0.9, b2=0.999, eps=1e-8):
    """Pure (jittable) clipped Adam update; ``step`` is the count after this update."""
    grads = clip_by_global_norm(grads, clip_norm)
    m = {k: b1 * m[k] + (1 - b1) * grads[k] for k in params}
    v = {k: b2 * v[k] + (1 - b2) * grads[k] ** 2 for k in params}
    c1 = 1 - b1 ** step
    c2 = 1 - b2 ** step
    new = {k: params[k] - lr * (m[k] / c1) / (jnp.sqrt(v[k] / c2) + eps) for k in params}
    return new, m, v


def adam_step(params: dict, grads: dict, state: AdamState):
    if set(grads) != set(params) or any(grads[k].shape != params[k].shape for k in params):
        raise ValueError("gradient and parameter shapes differ")
    if not all(bool(jnp.all(jnp.isfinite(g))) for g in grads.values()):
        raise FloatingPointError("non-finite gradient")
    step = state.step + 1
    new, m, v = adam_update(params, grads, state.m, state.v, step, state.lr, state.clip_norm,
                            state.b1, state.b2, state.eps)
    return new, AdamState(m, v, step, state.lr, state.clip_norm, state.b1, state.b2, state.eps, state.hyper)


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(path, params: dict, state: AdamState | None = None, meta: dict | None = None) -> None:
    arrays = {f"param:{k}": np.asarray(v, dtype=np.float64) for k, v in params.items()}
    header = {"version": CHECKPOINT_VERSION,
              "params": {k: list(np.shape(v)) for k, v in sorted(params.items())},
              "meta": meta or {}}
    if state is not None:
        arrays.update({f"adam_m:{k}": np.asarray(x) for k, x in state.m.items()})
        arrays.update({f"adam_v:{k}": np.asarray(x) for k, x in state.v.items()})
        header["adam"] = {"step": state.step, "lr": state.lr, "clip_norm": state.clip_norm,
                          "b1": state.b1, "b2": state.b2, "eps": state.eps}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    # np.savez stamps entries with the current time; fixed stamps keep reruns byte-identical
    with zipfile.ZipFile(Path(path), "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path):
    """Return ``(params, adam_state_or_None, meta)``."""
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = {k: jnp.asarray(data[f"param:{k}"]) for k in header["params"]}
        for k, shape in header["params"].items():
            if list(params[k].shape) != shape:
                raise ValueError(f"checkpoint tensor {k} has inconsistent shape")
        state = None
        if "adam" in header:
            a = header["adam"]
            state = AdamState({k: jnp.asarray(data[f"adam_m:{k}"]) for k in params},
                              {k: jnp.asarray(data[f"adam_v:{k}"]) for k in params},
                              a["step"], a["lr"], a["clip_norm"], a["b1"], a["b2"], a["eps"])
    return params, state, header["meta"]
