"""Symmetric positive definite helpers and Gaussian densities.

Everything is float64 numpy.  Inversions go through Cholesky factors; the
optional ``jitter`` adds ``jitter * I`` before factorizing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

LOG_2PI = float(np.log(2.0 * np.pi))


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class IllConditionedError(np.linalg.LinAlgError):
    pass


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def cholesky(a: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor, raising :class:`NotPositiveDefiniteError`."""
    a = np.asarray(a, dtype=float)
    if jitter:
        a = a + jitter * np.eye(a.shape[-1])
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefiniteError(str(err)) from None


def spd_solve(a: np.ndarray, b: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    c = cholesky(a, jitter)
    return linalg.cho_solve((c, True), b)


def spd_inverse(a: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    return symmetrize(spd_solve(a, np.eye(a.shape[-1]), jitter))


def spd_logdet(a: np.ndarray, jitter: float = 0.0) -> float:
    c = cholesky(a, jitter)
    return 2.0 * float(np.sum(np.log(np.diag(c))))


@dataclass(frozen=True)
class MomentGaussian:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class InfoGaussian:
    """Unnormalized log-quadratic ``-x'Hx/2 + eta'x + log_c``."""

    H: np.ndarray
    eta: np.ndarray
    log_c: float | None = None

    @property
    def dim(self) -> int:
        return self.eta.shape[0]

    def log_h(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        quad = np.einsum("...i,ij,...j->...", x, self.H, x)
        val = -0.5 * quad + x @ self.eta
        if self.log_c is not None:
            val = val + self.log_c
        return val

    def mean(self) -> np.ndarray:
        """``H^{-1} eta``; least squares when H is singular."""
        try:
            return spd_solve(self.H, self.eta)
        except NotPositiveDefiniteError:
            return np.linalg.lstsq(self.H, self.eta, rcond=None)[0]

    @classmethod
    def zero(cls, d: int, log_c: float | None = None) -> "InfoGaussian":
        return cls(np.zeros((d, d)), np.zeros(d), log_c)


def woodbury_pullback_core(P_tilde: np.ndarray, H_c: np.ndarray, jitter: float = 0.0):
    """Return ``(Qinv, QinvHcinv)`` without inverting ``H_c``.

    ``Qinv = P - P (P + H_c)^{-1} P`` and ``QinvHcinv = P (P + H_c)^{-1}``
    where ``P`` is the inverse transition covariance.  These equal
    ``(Sigma + H_c^{-1})^{-1}`` and ``(Sigma + H_c^{-1})^{-1} H_c^{-1}``
    whenever ``H_c`` is invertible.
    """
    P = np.asarray(P_tilde, dtype=float)
    S = symmetrize(P + H_c)
    c = cholesky(S, jitter)
    # (P + H)^{-1} P, then transpose to get P (P + H)^{-1} (both symmetric)
    SinvP = linalg.cho_solve((c, True), P)
    QinvHcinv = SinvP.T
    Qinv = symmetrize(P - P @ SinvP)
    return Qinv, QinvHcinv


def info_to_moment(g: InfoGaussian, max_condition: float = 1e10, jitter: float = 0.0) -> MomentGaussian:
    H = np.asarray(g.H, dtype=float)
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > max_condition:
        raise IllConditionedError(f"precision condition number {cond:.3g} exceeds {max_condition:.3g}")
    c = cholesky(H, jitter)
    cov = symmetrize(linalg.cho_solve((c, True), np.eye(H.shape[0])))
    mean = linalg.cho_solve((c, True), g.eta)
    return MomentGaussian(mean, cov)


def moment_to_info(g: MomentGaussian) -> InfoGaussian:
    H = spd_inverse(g.cov)
    return InfoGaussian(H, H @ g.mean)


def gaussian_logpdf(x, g: MomentGaussian) -> np.ndarray:
    """Exact log density; ``x`` may carry leading batch dimensions."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(g.mean, dtype=float)
    if x.shape[-1] != mean.shape[-1]:
        raise ValueError("dimension mismatch")
    c = cholesky(g.cov)
    diff = (x - mean).reshape(-1, mean.shape[-1]).T
    z = linalg.solve_triangular(c, diff, lower=True)
    d = mean.shape[-1]
    out = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(c))) - 0.5 * d * LOG_2PI
    return out.reshape(x.shape[:-1]) if x.ndim > 1 else float(out[0])
