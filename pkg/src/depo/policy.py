"""Tabular softmax policies and the preference-optimization objectives over them.

Everything is written in terms of the logit matrix ``L`` (M prompts x K
responses). Objectives are evaluated from aggregated counts so the cost per
evaluation is O(M K^2) regardless of how many comparisons have been seen.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_expit, log_softmax

from .mathcore import CovarianceState, sigmoid
from .world import ConfigError, World

ENUMERATION_BUDGET = 10**6
MAX_HALVINGS = 20


class PolicyOptimizationError(FloatingPointError):
    """Non-finite gradient encountered while updating the policy."""


@dataclass
class SoftmaxPolicy:
    logits: np.ndarray

    @classmethod
    def uniform(cls, M: int, K: int) -> "SoftmaxPolicy":
        return cls(np.zeros((M, K)))

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def copy(self) -> "SoftmaxPolicy":
        return SoftmaxPolicy(self.logits.copy())


@dataclass
class TrainConfig:
    beta: float = 0.03
    alpha: float = 0.0
    H: int = 50
    gd_steps: int = 50
    gd_lr: float = 0.5

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("beta must be > 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.H < 1 or self.gd_steps < 0 or not self.gd_lr > 0:
            raise ConfigError("H >= 1, gd_steps >= 0 and gd_lr > 0 required")


@dataclass
class PolicyTriple:
    current: SoftmaxPolicy
    reference: SoftmaxPolicy
    sampler: SoftmaxPolicy

    @classmethod
    def start(cls, M: int, K: int) -> "PolicyTriple":
        ref = SoftmaxPolicy.uniform(M, K)
        return cls(current=ref.copy(), reference=ref, sampler=ref.copy())


def recenter(logits: np.ndarray) -> np.ndarray:
    return logits - logits.max(axis=1, keepdims=True)


def margin(policy: SoftmaxPolicy, ref: SoftmaxPolicy, x: int, y: int, yp: int) -> float:
    """log pi(y|x)/ref(y|x) - log pi(y'|x)/ref(y'|x), from log-softmax."""
    lp, lr = policy.log_probs()[x], ref.log_probs()[x]
    return float((lp[y] - lr[y]) - (lp[yp] - lr[yp]))


# -- aggregated data ---------------------------------------------------------

@dataclass
class PairCounts:
    """Counts of (prompt, first, second) index triples on an M x K x K grid."""

    M: int
    K: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.M, self.K, self.K))

    def add(self, x: int, a: int, b: int, n: float = 1.0) -> None:
        self.counts[x, a, b] += n

    @classmethod
    def from_triples(cls, M: int, K: int, triples) -> "PairCounts":
        pc = cls(M, K)
        for x, a, b in triples:
            pc.add(x, a, b)
        return pc

    def nonzero(self):
        idx = np.nonzero(self.counts)
        return idx[0], idx[1], idx[2], self.counts[idx]


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def dpo_term(logits, ref_logp, wl: PairCounts, beta: float):
    """sum n log sigma(beta m(x; w, l)) and its gradient w.r.t. the logits.

    Evaluated densely over the (x, w, l) grid; empty cells carry zero weight.
    """
    ratio = _log_softmax(logits) - ref_logp
    m = ratio[:, :, None] - ratio[:, None, :]
    n = wl.counts
    val = float(np.sum(n * log_expit(beta * m)))
    c = n * (beta * expit(-beta * m))
    # the log-partition cancels inside m, so d m / d logits = e_w - e_l
    return val, c.sum(axis=2) - c.sum(axis=1)


def bonus_term(logits, ref_logp, pairs: PairCounts, b: np.ndarray, beta: float):
    """sum n sigma(beta log pi(y'|x)/ref(y'|x) + b(x, y, y')) and its gradient.

    ``b`` is an (M, K, K) array of per-pair bonuses indexed by (x, y, y').
    """
    logp = _log_softmax(logits)
    u = beta * (logp - ref_logp)[:, None, :] + b
    n = pairs.counts
    s = expit(u)
    val = float(np.sum(n * s))
    per_yp = (n * (beta * s * (1.0 - s))).sum(axis=1)
    return val, per_yp - per_yp.sum(axis=1, keepdims=True) * np.exp(logp)


def exact_bonus_term(logits, ref_logp, sampler_probs, rho, b, beta):
    """G(pi, b) = E_{x, y~pi, y'~pi_sam} sigma(beta m_pi(x; y, y') + b) and its logit gradient."""
    logp = _log_softmax(logits)
    p = np.exp(logp)
    ratio = logp - ref_logp
    u = beta * (ratio[:, :, None] - ratio[:, None, :]) + b
    s = expit(u)
    A = s * sampler_probs[:, None, :]
    Sp = s * (1.0 - s) * sampler_probs[:, None, :]
    a = A.sum(axis=2)
    val = float(rho @ np.sum(p * a, axis=1))
    # mass term through pi(y), then the margin term where d m / d L_k = e_y - e_y'
    grad = p * (a - np.sum(p * a, axis=1, keepdims=True))
    grad += beta * (p * Sp.sum(axis=2) - np.einsum("my,myk->mk", p, Sp))
    return val, rho[:, None] * grad


def pruned_objective(logits, ref_logp, wl: PairCounts, pairs: PairCounts, b, alpha, beta):
    val, grad = dpo_term(logits, ref_logp, wl, beta)
    if alpha == 0:
        return val, grad
    bval, bgrad = bonus_term(logits, ref_logp, pairs, b, beta)
    return val + alpha * bval, grad + alpha * bgrad


def exact_objective(logits, ref_logp, wl: PairCounts, sampler_probs, rho, b, alpha, beta):
    val, grad = dpo_term(logits, ref_logp, wl, beta)
    if alpha == 0:
        return val, grad
    gval, ggrad = exact_bonus_term(logits, ref_logp, sampler_probs, rho, b, beta)
    return val + alpha * gval, grad + alpha * ggrad


# -- record-level API --------------------------------------------------------

def _winner_counts(dataset, M, K) -> PairCounts:
    return PairCounts.from_triples(M, K, ((r.prompt_id, r.winner_id, r.loser_id) for r in dataset))


def dpo_loss(policy: SoftmaxPolicy, ref: SoftmaxPolicy, dataset: Sequence, beta: float) -> float:
    """sum over records of log sigma(beta m(x; y_w, y_l)) (higher is better)."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    M, K = policy.logits.shape
    val, _ = dpo_term(policy.logits, ref.log_probs(), _winner_counts(dataset, M, K), beta)
    return val


def pair_bonus_grid(world: World, state: CovarianceState, width: float) -> np.ndarray:
    """(M, K, K) grid of width * ||psi(x, y, y')||_{V^{-1}}."""
    if width == 0:
        return np.zeros((world.M, world.K, world.K))
    return width * np.sqrt(state.quad_forms(world.all_psi()))


def depo_pruned_objective(policy, ref, dataset, state, width, alpha, beta, world: World,
                          sampled_pairs=None) -> float:
    """DPO likelihood plus alpha times the per-pair optimistic term over the sampled pairs.

    ``sampled_pairs`` is a list of (x, y, y') triples; by default it is read off the records.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    dpo = dpo_loss(policy, ref, dataset, beta)
    if alpha == 0:
        return dpo
    M, K = policy.logits.shape
    if sampled_pairs is None:
        sampled_pairs = [(r.prompt_id, r.y, r.yprime) for r in dataset]
    pairs = PairCounts.from_triples(M, K, sampled_pairs)
    b = pair_bonus_grid(world, state, width)
    bval, _ = bonus_term(policy.logits, ref.log_probs(), pairs, b, beta)
    return dpo + alpha * bval


def check_enumeration(world: World) -> None:
    if world.M * world.K**2 > ENUMERATION_BUDGET:
        raise ConfigError(f"M*K^2 = {world.M * world.K**2} exceeds enumeration budget {ENUMERATION_BUDGET}")


def depo_exact_bonus(policy, sampler, ref, world: World, state: CovarianceState,
                     width: float, beta: float) -> float:
    """Exact E_{x~rho, y~pi, y'~pi_sam} sigma(beta m_pi(x; y, y') + b(x, y, y'))."""
    check_enumeration(world)
    ratio = policy.log_probs() - ref.log_probs()
    m = ratio[:, :, None] - ratio[:, None, :]
    b = pair_bonus_grid(world, state, width)
    weight = world.rho[:, None, None] * policy.probs()[:, :, None] * sampler.probs()[:, None, :]
    return float(np.sum(weight * sigmoid(beta * m + b)))


def sampled_bonus(policy, ref, world: World, state: CovarianceState, width: float, beta: float,
                  triples) -> tuple[float, float]:
    """Monte-Carlo counterpart of ``depo_exact_bonus`` over drawn (x, y, y') triples.

    Returns ``(mean, standard_error)``.
    """
    tr = np.asarray(triples, dtype=np.int64)
    ratio = policy.log_probs() - ref.log_probs()
    x, y, yp = tr[:, 0], tr[:, 1], tr[:, 2]
    m = ratio[x, y] - ratio[x, yp]
    b = width * np.sqrt(state.quad_forms(world.psi(x, y, yp))) if width else 0.0
    v = sigmoid(beta * m + b)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


# -- optimization ------------------------------------------------------------

Objective = Callable[[np.ndarray], tuple]


def optimize_policy(start: SoftmaxPolicy, objective: Objective, cfg: TrainConfig) -> tuple:
    """Gradient ascent on the logits with per-step backtracking.

    Returns ``(policy, final_value)``. Each step starts from ``gd_lr`` and halves
    until the objective does not decrease; after ``MAX_HALVINGS`` failures the
    step is skipped.
    """
    L = start.logits.copy()
    val, grad = objective(L)
    for _ in range(cfg.gd_steps):
        if not np.all(np.isfinite(grad)):
            raise PolicyOptimizationError("non-finite policy gradient")
        lr = cfg.gd_lr
        for _ in range(MAX_HALVINGS + 1):
            cand = recenter(L + lr * grad)
            cval, cgrad = objective(cand)
            if cval >= val:
                L, val, grad = cand, cval, cgrad
                break
            lr *= 0.5
        else:
            break
    return SoftmaxPolicy(L), val


def refresh_sampler(triple: PolicyTriple, t: int, H: int) -> PolicyTriple:
    """At the first round of each H-block the sampler becomes a snapshot of the current policy."""
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    if (t - 1) % H == 0:
        return PolicyTriple(current=triple.current, reference=triple.reference,
                            sampler=triple.current.copy())
    return triple
