"""Edge dynamics and the Gaussian observation model.

Model callables accept states with leading batch dimensions (``(..., d)``) and
work on both numpy and jax arrays, so the same objects drive the numpy
reference sampler and the jitted trainer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gaussian import LOG_2PI, MomentGaussian, cholesky, gaussian_logpdf


def xp_of(*arrays):
    """numpy or jax.numpy, whichever the inputs live in."""
    for a in arrays:
        if type(a).__module__.startswith("jax"):
            import jax.numpy as jnp
            return jnp
    return np


def matvec(a, v):
    """Batched ``a @ v`` for ``a`` of shape (..., d, k) and ``v`` of shape (..., k)."""
    return (a @ v[..., None])[..., 0]


# -- discrete kernels ----------------------------------------------------

@dataclass(frozen=True)
class LinearKernelSpec:
    """``x' ~ N(B x + beta, Sigma_tilde)``."""

    B: np.ndarray
    beta: np.ndarray
    Sigma_tilde: np.ndarray

    def __post_init__(self):
        for name in ("B", "beta", "Sigma_tilde"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        d = self.beta.shape[0]
        if self.B.shape != (d, d) or self.Sigma_tilde.shape != (d, d):
            raise ValueError("inconsistent shapes in LinearKernelSpec")
        S = self.Sigma_tilde
        if not np.allclose(S, S.T, rtol=1e-12, atol=1e-14) or np.linalg.eigvalsh(S).min() < -1e-12 * max(1.0, np.abs(S).max()):
            raise ValueError("Sigma_tilde must be symmetric positive semidefinite")

    @property
    def dim(self) -> int:
        return self.beta.shape[0]

    def as_kernel(self) -> "DiscreteKernel":
        B, beta, S = self.B, self.beta, self.Sigma_tilde
        return DiscreteKernel(lambda x: matvec(B, x) + beta, lambda x: S, linear=self)


@dataclass(frozen=True)
class DiscreteKernel:
    """Gaussian transition ``N(mean_fn(x), cov_fn(x))``."""

    mean_fn: Callable
    cov_fn: Callable
    linear: LinearKernelSpec | None = None

    def logpdf(self, x_new, x) -> float:
        return gaussian_logpdf(x_new, MomentGaussian(self.mean_fn(x), self.cov_fn(x)))

    def sample(self, x, rng) -> np.ndarray:
        mean = self.mean_fn(x)
        return mean + cholesky(self.cov_fn(x)) @ rng.standard_normal(mean.shape[-1])


def linear_gaussian_ar_kernel(alpha: float, d: int) -> DiscreteKernel:
    """``x' ~ N(sqrt(1 - alpha) x, alpha I)``, invariant for N(0, I)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return LinearKernelSpec(np.sqrt(1.0 - alpha) * np.eye(d), np.zeros(d), alpha * np.eye(d)).as_kernel()


def ar_alpha_for_depth(depth: int, final_variance: float = 0.9) -> float:
    """alpha such that the variance after ``depth`` steps from a point is ``final_variance``."""
    return 1.0 - (1.0 - final_variance) ** (1.0 / depth)


def gaussian_prior_kernel(mean, cov) -> LinearKernelSpec:
    """Virtual-root edge whose output is N(mean, cov) whatever the input."""
    mean = np.asarray(mean, dtype=float)
    cholesky(np.asarray(cov, dtype=float))
    return LinearKernelSpec(np.zeros((mean.shape[0],) * 2), mean, cov)


# -- SDEs ----------------------------------------------------------------

@dataclass(frozen=True)
class LinearSdeSpec:
    """``dZ = (B(t) Z + beta(t)) dt + sigma_tilde(t) dW``."""

    B_fn: Callable
    beta_fn: Callable
    sigma_tilde_fn: Callable
    dim: int
    time_homogeneous: bool = False

    @classmethod
    def constant(cls, B, beta, sigma_tilde) -> "LinearSdeSpec":
        B = np.asarray(B, dtype=float)
        beta = np.asarray(beta, dtype=float)
        sig = np.asarray(sigma_tilde, dtype=float)
        return cls(lambda t: B, lambda t: beta, lambda t: sig, beta.shape[0], True)

    def Sigma_tilde(self, t) -> np.ndarray:
        s = self.sigma_tilde_fn(t)
        return s @ s.T

    def as_sde(self) -> "SdeSpec":
        # time-homogeneous view, valid for the constant specs used as "aux = model"
        B, beta, sig = self.B_fn(0.0), self.beta_fn(0.0), self.sigma_tilde_fn(0.0)
        return SdeSpec(lambda z: matvec(B, z) + beta, lambda z: sig, self.dim, linear=self,
                       constant_dispersion=True)


@dataclass(frozen=True)
class SdeSpec:
    """``dZ = drift_fn(Z) dt + dispersion_fn(Z) dW``."""

    drift_fn: Callable
    dispersion_fn: Callable
    dim: int
    linear: LinearSdeSpec | None = None
    constant_dispersion: bool = False

    def Sigma(self, z):
        s = self.dispersion_fn(z)
        return s @ xp_of(s, z).swapaxes(s, -1, -2)


def ou_sde(alpha_mat, Theta, sigma_mat) -> SdeSpec:
    """``dZ = alpha (Theta - Z) dt + sigma dW``."""
    alpha_mat = np.asarray(alpha_mat, dtype=float)
    Theta = np.asarray(Theta, dtype=float)
    sigma_mat = np.asarray(sigma_mat, dtype=float)
    d = Theta.shape[0]
    if alpha_mat.shape != (d, d) or sigma_mat.shape != (d, d):
        raise ValueError("inconsistent OU parameter shapes")
    lin = LinearSdeSpec.constant(-alpha_mat, alpha_mat @ Theta, sigma_mat)
    at = alpha_mat @ Theta
    return SdeSpec(lambda z: at - matvec(alpha_mat, z), lambda z: sigma_mat, d, linear=lin,
                   constant_dispersion=True)


PAPER_OU = dict(alpha_mat=[[4.0, -1.0], [-2.0, 1.0]], Theta=[2.0, -3.0], sigma_mat=[[0.2, 0.0], [0.0, 0.1]])


def double_well_potential(z, alpha: float):
    return alpha * (z * z - 1.0) ** 2


def double_well_sde(alpha: float, sigma: float) -> SdeSpec:
    """Scalar ``dZ = -d/dz[alpha (Z^2 - 1)^2] dt + sigma dW``."""
    if alpha <= 0 or sigma <= 0:
        raise ValueError("alpha and sigma must be positive")
    sig = np.array([[float(sigma)]])
    return SdeSpec(lambda z: -4.0 * alpha * z * (z * z - 1.0), lambda z: sig, 1,
                   constant_dispersion=True)


def kunita_kbar(r, alpha: float, sigma: float):
    """Radial profile ``4 alpha (3 + 3r + r^2) exp(-r / sigma)``.

    The polynomial uses the raw distance and only the exponential is scaled
    by ``sigma``.
    """
    xp = xp_of(r)
    return 4.0 * alpha * (3.0 + 3.0 * r + r * r) * xp.exp(-r / sigma)


def kunita_kernel_matrix(z, alpha: float, sigma: float):
    """``K(z)`` of shape (..., 2n, 2n) for flattened landmarks ``z`` of shape (..., 2n)."""
    xp = xp_of(z)
    pts = z.reshape(z.shape[:-1] + (-1, 2))
    diff = pts[..., :, None, :] - pts[..., None, :, :]
    # sqrt has an infinite derivative at 0; keep the diagonal away from it
    sq = xp.sum(diff * diff, axis=-1)
    n = pts.shape[-2]
    eye_n = xp.eye(n)
    r = xp.sqrt(sq + eye_n) * (1.0 - eye_n)
    kb = kunita_kbar(r, alpha, sigma)
    K = kb[..., :, None, :, None] * xp.eye(2)[:, None, :]
    return K.reshape(z.shape[:-1] + (2 * n, 2 * n))


def kunita_sde(alpha: float, sigma: float, n_landmarks: int) -> SdeSpec:
    if alpha <= 0 or sigma <= 0:
        raise ValueError("alpha and sigma must be positive")
    d = 2 * n_landmarks

    def drift(z):
        return 0.0 * z

    return SdeSpec(drift, lambda z: kunita_kernel_matrix(z, alpha, sigma), d)


def brownian_aux(sigma) -> LinearSdeSpec:
    """Zero-drift auxiliary ``dZ = sigma dW``."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = sigma.shape[0]
    return LinearSdeSpec.constant(np.zeros((d, d)), np.zeros(d), sigma)


def kunita_aux(alpha: float, sigma: float):
    """Auxiliary factory: constant ``sigma_tilde = K(H^{-1} eta)`` from the child message."""
    def make(msg) -> LinearSdeSpec:
        return brownian_aux(kunita_kernel_matrix(msg.mean(), alpha, sigma))
    return make


# -- observations --------------------------------------------------------

@dataclass(frozen=True)
class ObservationModel:
    """``Y | X ~ N(X, Sigma_obs)``."""

    Sigma_obs: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.Sigma_obs, dtype=float))
        object.__setattr__(self, "Sigma_obs", S)
        c = cholesky(S)
        object.__setattr__(self, "_chol", c)
        object.__setattr__(self, "_prec", np.linalg.inv(S))
        object.__setattr__(self, "_logdet", 2.0 * float(np.sum(np.log(np.diag(c)))))

    @classmethod
    def isotropic(cls, var: float, d: int) -> "ObservationModel":
        return cls(var * np.eye(d))

    @property
    def precision(self) -> np.ndarray:
        return self._prec

    def loglik(self, y, x):
        """Log density of ``y`` given state(s) ``x``; numpy or jax inputs."""
        xp = xp_of(x, y)
        diff = y - x
        quad = xp.sum(diff * matvec(self._prec, diff), axis=-1)
        d = self.Sigma_obs.shape[0]
        return -0.5 * quad - 0.5 * self._logdet - 0.5 * d * LOG_2PI


def observation_loglik(y, x, obs: ObservationModel):
    return obs.loglik(np.asarray(y, dtype=float), np.asarray(x, dtype=float))
