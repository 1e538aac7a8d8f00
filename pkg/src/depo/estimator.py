"""Logistic MLE over pairwise features and the confidence widths built on it."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .mathcore import CovarianceState, sigmoid, sigmoid_prime

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 100
SIGMA_PRIME_FLOOR = 1e-300


@dataclass(frozen=True)
class PreferenceRecord:
    t: int
    prompt_id: int
    y: int
    yprime: int
    winner_id: int
    loser_id: int
    psi_wl: np.ndarray
    psi_policy: np.ndarray
    z: int


@dataclass
class RewardEstimate:
    theta_hat: np.ndarray
    lam: float
    newton_iters: int = 0
    grad_norm: float = 0.0
    converged: bool = True
    kappa_true: float = 0.25
    kappa_plugin: float = 0.25
    B_t: float = 0.0
    eta_t: float = 0.0
    beta_conf: float = 0.0
    width_gamma: float = 0.0
    r_bar: float = 0.0


# -- MLE ---------------------------------------------------------------------

def logistic_objective(theta, Psi, z, lam, weights=None):
    """sum_s w_s log(1 + exp(-z_s <theta, psi_s>)) + lam/2 ||theta||^2, with gradient."""
    theta = np.asarray(theta, dtype=np.float64)
    margin = z * (Psi @ theta)
    w = np.ones_like(margin) if weights is None else weights
    val = float(w @ np.logaddexp(0.0, -margin)) + 0.5 * lam * float(theta @ theta)
    coef = -w * z * sigmoid(-margin)
    grad = Psi.T @ coef + lam * theta
    if not math.isfinite(val):
        raise FloatingPointError("logistic objective is not finite")
    return val, grad


def fit_mle_arrays(Psi, z, lam: float, warm_start=None, weights=None, tol: float = NEWTON_TOL,
                   max_iter: int = NEWTON_MAX_ITER) -> RewardEstimate:
    """Damped Newton for the L2-regularized logistic likelihood.

    ``weights`` lets repeated (psi, z) rows be collapsed into counts.
    """
    if not lam > 0:
        raise ValueError("lam must be > 0")
    Psi = np.asarray(Psi, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    dim = Psi.shape[1]
    theta = np.zeros(dim) if warm_start is None else np.array(warm_start, dtype=np.float64)
    w = np.ones(len(z)) if weights is None else np.asarray(weights, dtype=np.float64)
    val, grad = logistic_objective(theta, Psi, z, lam, w)
    it = 0
    while np.max(np.abs(grad)) > tol and it < max_iter:
        curv = w * sigmoid_prime(Psi @ theta)
        H = (Psi.T * curv) @ Psi + lam * np.eye(dim)
        step = np.linalg.solve(H, grad)
        size = 1.0
        gmax = np.max(np.abs(grad))
        noise = 1e-12 * max(1.0, abs(val))
        for _ in range(60):
            cand = theta - size * step
            cval, cgrad = logistic_objective(cand, Psi, z, lam, w)
            # near the optimum the objective is flat to rounding; judge by the gradient there
            if cval <= val or (cval - val <= noise and np.max(np.abs(cgrad)) < gmax):
                break
            size *= 0.5
        theta, val, grad = cand, cval, cgrad
        it += 1
    gnorm = float(np.max(np.abs(grad)))
    return RewardEstimate(theta_hat=theta, lam=lam, newton_iters=it, grad_norm=gnorm,
                          converged=gnorm <= tol)


def fit_mle(records: Sequence[PreferenceRecord], lam: float, warm_start=None,
            dim: Optional[int] = None) -> RewardEstimate:
    """MLE from preference records using the generated orientation and its label."""
    if not records:
        if dim is None and warm_start is None:
            raise ValueError("dim is required for an empty record list")
        dim = dim if dim is not None else len(warm_start)
        return RewardEstimate(theta_hat=np.zeros(dim), lam=lam)
    Psi = np.stack([r.psi_policy for r in records])
    z = np.array([r.z for r in records], dtype=np.float64)
    return fit_mle_arrays(Psi, z, lam, warm_start=warm_start)


def gap_estimate(est: RewardEstimate, psi) -> float:
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != est.theta_hat.shape:
        raise ValueError("feature dimension does not match the estimate")
    return float(est.theta_hat @ psi)


# -- curvature and widths ----------------------------------------------------

def local_curvature(theta, history) -> tuple[float, float, bool]:
    """Return ``(kappa, B, empty)`` with B = max |<theta, psi_s>| and kappa = sigma'(B).

    An empty history gives kappa = 1/4, B = 0 and ``empty=True``.
    """
    H = np.asarray(history, dtype=np.float64)
    if H.size == 0:
        return 0.25, 0.0, True
    B = float(np.max(np.abs(H @ np.asarray(theta, dtype=np.float64))))
    return float(sigmoid_prime(B)), B, False


def eta(state: CovarianceState, S: float, delta: float) -> float:
    """sqrt(lam) S + sqrt(2 (1/2 log det V - 1/2 D log lam + log 1/delta))."""
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    inner = 0.5 * state.logdet_ratio() + math.log(1.0 / delta)
    return math.sqrt(state.lam) * S + math.sqrt(2.0 * max(inner, 0.0))


def confidence_width(kappa: float, state: CovarianceState, S: float, delta: float) -> float:
    if not kappa > 0:
        raise ValueError("kappa must be > 0")
    return eta(state, S, delta) / max(kappa, SIGMA_PRIME_FLOOR)


class RadiusBuffer:
    """FIFO of stored pairwise features used for the median radius."""

    def __init__(self, capacity: int = 512):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: deque = deque(maxlen=capacity)

    def append(self, psi) -> None:
        self.entries.append(np.asarray(psi, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.entries)

    def as_array(self) -> np.ndarray:
        return np.stack(self.entries) if self.entries else np.zeros((0, 0))


def empirical_width(buffer: RadiusBuffer, state: CovarianceState, c_b: float,
                    epsilon: float) -> tuple[float, float, bool]:
    """Median elliptical radius over the buffer and the width proxy c_b / (r_bar + eps).

    Returns ``(r_bar, width_gamma, empty)``.
    """
    if not (c_b > 0 and epsilon > 0):
        raise ValueError("c_b and epsilon must be > 0")
    if len(buffer) == 0:
        return 0.0, c_b / epsilon, True
    radii = np.sqrt(state.quad_forms(buffer.as_array()))
    r_bar = float(np.median(radii))
    return r_bar, c_b / (r_bar + epsilon), False


def bonus(psi, state: CovarianceState, width: float) -> float:
    if width < 0:
        raise ValueError("width must be >= 0")
    return width * math.sqrt(state.quad_form(psi))


def bonuses(Psi, state: CovarianceState, width: float) -> np.ndarray:
    return width * np.sqrt(state.quad_forms(Psi))

