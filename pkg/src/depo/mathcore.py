"""Small dense numerical kernel: logistic link and the regularized covariance state.

The covariance state keeps ``V``, its inverse and ``log det V`` in step so
that elliptical radii and log-determinant ratios cost O(D^2) per round.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

REFRESH_EVERY = 4096


def sigmoid(u):
    """Numerically stable logistic function (scalar or array)."""
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def sigmoid_prime(u):
    """sigma(u) * (1 - sigma(u)), evaluated from |u| so it is exactly symmetric."""
    a = np.abs(np.asarray(u, dtype=np.float64))
    e = np.exp(-a)
    # rounding can overshoot the exact maximum 1/4 near u = 0
    out = np.minimum(e / (1.0 + e) ** 2, 0.25)
    return out if out.ndim else float(out)


def log_sigmoid(u):
    """log sigma(u) without overflow."""
    u = np.asarray(u, dtype=np.float64)
    out = -np.logaddexp(0.0, -u)
    return out if out.ndim else float(out)


class NumericalError(RuntimeError):
    """Raised when an internal consistency check on the covariance fails."""


@dataclass
class CovarianceState:
    """Regularized covariance ``V = lam*I + sum psi psi^T`` with maintained inverse."""

    dim: int
    lam: float
    count: int = 0
    V: np.ndarray = field(default=None, repr=False)
    V_inv: np.ndarray = field(default=None, repr=False)
    logdet_V: float = 0.0
    norm_warnings: int = 0
    # 0 disables the periodic Cholesky refresh
    refresh_every: int = REFRESH_EVERY

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if not self.lam > 0:
            raise ValueError("lam must be > 0")
        if self.V is None:
            self.V = self.lam * np.eye(self.dim)
            self.V_inv = np.eye(self.dim) / self.lam
            self.logdet_V = self.dim * math.log(self.lam)

    @classmethod
    def initial(cls, dim: int, lam: float) -> "CovarianceState":
        return cls(dim=dim, lam=lam)

    def copy(self) -> "CovarianceState":
        return CovarianceState(
            dim=self.dim, lam=self.lam, count=self.count, V=self.V.copy(),
            V_inv=self.V_inv.copy(), logdet_V=self.logdet_V,
            norm_warnings=self.norm_warnings, refresh_every=self.refresh_every,
        )

    def update(self, psi) -> float:
        """In-place rank-1 update. Returns ``psi^T V_old^{-1} psi``."""
        psi = _check_vec(psi, self.dim)
        if psi @ psi > 1.0 + 1e-12:
            self.norm_warnings += 1
        v = self.V_inv @ psi
        q = float(psi @ v)
        self.V += np.outer(psi, psi)
        self.V_inv -= np.outer(v, v) / (1.0 + q)
        # keep exact symmetry; the rank-1 correction is symmetric up to rounding
        self.V_inv = 0.5 * (self.V_inv + self.V_inv.T)
        self.logdet_V += math.log1p(q)
        self.count += 1
        if self.refresh_every and self.count % self.refresh_every == 0:
            self.refresh()
        return q

    def refresh(self) -> None:
        """Recompute inverse and log-determinant from ``V`` by Cholesky."""
        try:
            L = np.linalg.cholesky(self.V)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance lost positive definiteness") from exc
        L_inv = np.linalg.solve(L, np.eye(self.dim))
        self.V_inv = L_inv.T @ L_inv
        self.logdet_V = 2.0 * float(np.sum(np.log(np.diag(L))))

    def quad_form(self, psi) -> float:
        psi = _check_vec(psi, self.dim)
        return max(float(psi @ self.V_inv @ psi), 0.0)

    def quad_forms(self, Psi: np.ndarray) -> np.ndarray:
        """Row-wise ``psi^T V^{-1} psi`` for a stack of features."""
        Psi = np.asarray(Psi, dtype=np.float64)
        if Psi.shape[-1] != self.dim:
            raise ValueError(f"expected trailing dim {self.dim}, got {Psi.shape}")
        return np.maximum(np.einsum("...i,ij,...j->...", Psi, self.V_inv, Psi), 0.0)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.V)[0])

    def logdet_ratio(self) -> float:
        """log det(V) - log det(lam I)."""
        return self.logdet_V - self.dim * math.log(self.lam)


def _check_vec(psi, dim: int) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (dim,):
        raise ValueError(f"feature has shape {psi.shape}, state expects ({dim},)")
    if not np.all(np.isfinite(psi)):
        raise ValueError("feature contains non-finite entries")
    return psi


def sm_update(state: CovarianceState, psi) -> CovarianceState:
    """Functional Sherman-Morrison update; the input state is left untouched."""
    new = state.copy()
    new.update(psi)
    return new


def quad_form(state: CovarianceState, psi) -> float:
    return state.quad_form(psi)


def refresh_inverse(state: CovarianceState) -> CovarianceState:
    new = state.copy()
    new.refresh()
    return new


def min_eigenvalue(state: CovarianceState) -> float:
    return state.min_eigenvalue()


def potential_bound(dim: int, T: int, lam: float) -> float:
    """Elliptical potential ceiling ``2 D log(1 + T / (lam D))``."""
    return 2.0 * dim * math.log1p(T / (lam * dim))


def warn_if_unnormalized(state: CovarianceState) -> None:
    if state.norm_warnings:
        warnings.warn(f"{state.norm_warnings} features exceeded unit norm", RuntimeWarning)
