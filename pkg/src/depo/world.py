"""Synthetic linear Bradley-Terry world.

A world is a finite set of prompts, each with a pool of ``K`` responses whose
features live in R^d. Rewards are linear in the features, preferences follow
the Bradley-Terry model, and pairwise features are the concatenation
``psi(x, y, y') = [phi(x, y); phi(x, y')]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .mathcore import sigmoid

WORLD_FORMAT = "depo-world"
WORLD_VERSION = 1
PHI_NORM = 1.0 / math.sqrt(2.0)

GENERATORS = ("gaussian", "clustered")


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class VersionMismatch(ConfigError):
    """World file header does not carry the supported format version."""


@dataclass
class WorldSpec:
    num_prompts: int = 16
    pool_size: int = 4
    feature_dim: int = 4
    S: float = 2.0
    R_max: float = 2.0
    generator: str = "gaussian"
    seed: int = 0
    theta_plus: Optional[np.ndarray] = None
    prompt_weights: Optional[np.ndarray] = None
    # >0: draw "hidden states" in this dimension and sparse-project down to d
    hidden_dim: int = 0
    center: bool = False
    cluster_noise: float = 0.05

    def validate(self) -> list[str]:
        errs = []
        if self.num_prompts < 1:
            errs.append("num_prompts: must be >= 1")
        if self.pool_size < 2:
            errs.append("pool_size: must be >= 2")
        if self.feature_dim < 1:
            errs.append("feature_dim: must be >= 1")
        if not self.S > 0:
            errs.append("S: must be > 0")
        if not self.R_max > 0:
            errs.append("R_max: must be > 0")
        if self.generator not in GENERATORS:
            errs.append(f"generator: must be one of {GENERATORS}")
        if self.hidden_dim < 0:
            errs.append("hidden_dim: must be >= 0")
        if self.theta_plus is not None:
            tp = np.asarray(self.theta_plus, dtype=np.float64)
            if tp.shape != (self.feature_dim,):
                errs.append("theta_plus: must have length feature_dim")
            elif math.sqrt(2.0) * np.linalg.norm(tp) > self.S * (1 + 1e-12):
                errs.append("theta_plus: ||[theta_plus; -theta_plus]|| must be <= S")
        if self.prompt_weights is not None:
            w = np.asarray(self.prompt_weights, dtype=np.float64)
            if w.shape != (self.num_prompts,) or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
                errs.append("prompt_weights: must be a probability vector of length num_prompts")
        return errs


@dataclass
class ProjectionMatrix:
    """Very sparse random projection with entries in sqrt(s/d) * {+1, 0, -1}."""

    matrix: np.ndarray
    s: float
    seed: int

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]


def make_projection(rows: int, cols: int, seed: int, s: Optional[float] = None) -> ProjectionMatrix:
    """Entries are +-1 with probability 1/(2s) each and 0 otherwise, scaled by sqrt(s/rows).

    With this scaling ``E ||P v||^2 = ||v||^2``. ``s`` defaults to sqrt(cols).
    """
    if s is None:
        s = math.sqrt(cols)
    if s < 1:
        raise ConfigError("projection sparsity s must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random((rows, cols))
    signs = np.where(u < 0.5 / s, 1.0, np.where(u < 1.0 / s, -1.0, 0.0))
    return ProjectionMatrix(matrix=signs * math.sqrt(s / rows), s=s, seed=seed)


def sparse_project(P: ProjectionMatrix, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != P.cols:
        raise ValueError(f"projection expects input dim {P.cols}, got {v.shape[-1]}")
    return v @ P.matrix.T


def center_per_prompt(features) -> np.ndarray:
    """Subtract the pool mean from each response feature of one prompt."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("need a non-empty (K, d) feature block")
    return f - f.mean(axis=0, keepdims=True)


@dataclass
class World:
    """Immutable environment: features ``phi[m, k]``, rewards and the true parameter."""

    spec: WorldSpec
    phi: np.ndarray          # (M, K, d)
    theta_plus: np.ndarray   # (d,)
    rho: np.ndarray          # (M,)
    shift: float
    # linear (unshifted) rewards <theta_plus, phi>; gaps are taken from these
    lin_reward: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.lin_reward = self.phi @ self.theta_plus
        for a in (self.phi, self.theta_plus, self.rho, self.lin_reward):
            a.setflags(write=False)

    @property
    def M(self) -> int:
        return self.phi.shape[0]

    @property
    def K(self) -> int:
        return self.phi.shape[1]

    @property
    def d(self) -> int:
        return self.phi.shape[2]

    @property
    def D(self) -> int:
        return 2 * self.phi.shape[2]

    @property
    def theta_star(self) -> np.ndarray:
        return np.concatenate([self.theta_plus, -self.theta_plus])

    @property
    def reward(self) -> np.ndarray:
        """Shifted rewards r*(x, y) in [0, R_max]."""
        return self.lin_reward + self.shift

    def psi(self, x, y, yp) -> np.ndarray:
        """Pairwise feature(s); broadcasts over integer index arrays."""
        return np.concatenate([self.phi[x, y], self.phi[x, yp]], axis=-1)

    def all_psi(self) -> np.ndarray:
        """(M, K, K, D) array of every pairwise feature."""
        M, K, d = self.phi.shape
        a = np.broadcast_to(self.phi[:, :, None, :], (M, K, K, d))
        b = np.broadcast_to(self.phi[:, None, :, :], (M, K, K, d))
        return np.concatenate([a, b], axis=-1)

    def gap_matrix(self) -> np.ndarray:
        """(M, K, K) true gaps r*(x, y) - r*(x, y')."""
        r = self.lin_reward
        return r[:, :, None] - r[:, None, :]

    def pref_matrix(self) -> np.ndarray:
        """(M, K, K) Bradley-Terry probabilities P*(y > y' | x)."""
        return sigmoid(self.gap_matrix())

    def _check_ids(self, x, y, yp):
        for name, v, hi in (("prompt", x, self.M), ("response", y, self.K), ("response", yp, self.K)):
            if not 0 <= v < hi:
                raise IndexError(f"{name} id {v} out of range [0, {hi})")


def _draw_features(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    M, K, d = spec.num_prompts, spec.pool_size, spec.feature_dim
    if spec.generator == "gaussian":
        if spec.hidden_dim > 0:
            P = make_projection(d, spec.hidden_dim, seed=int(rng.integers(2**63)))
            hidden = rng.standard_normal((M, K, spec.hidden_dim))
            return sparse_project(P, hidden)
        return rng.standard_normal((M, K, d))
    # clustered: every response sits near +u or -u for one shared direction u
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    signs = rng.choice([-1.0, 1.0], size=(M, K))
    return signs[..., None] * u + spec.cluster_noise * rng.standard_normal((M, K, d))


def build_world(spec: WorldSpec) -> World:
    errs = spec.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    phi = _draw_features(spec, rng)
    if spec.center:
        phi = np.stack([center_per_prompt(block) for block in phi])
    norms = np.linalg.norm(phi, axis=-1)
    top = norms.max()
    if top > 0:
        phi = phi * (PHI_NORM / top)
    if spec.theta_plus is not None:
        theta_plus = np.asarray(spec.theta_plus, dtype=np.float64).copy()
    else:
        direction = rng.standard_normal(spec.feature_dim)
        theta_plus = direction / np.linalg.norm(direction) * (spec.S / math.sqrt(2.0))
    rho = (np.full(spec.num_prompts, 1.0 / spec.num_prompts) if spec.prompt_weights is None
           else np.asarray(spec.prompt_weights, dtype=np.float64).copy())
    lin = phi @ theta_plus
    span = float(lin.max() - lin.min())
    if span > spec.R_max:
        raise ConfigError(f"reward span {span:.6g} exceeds R_max={spec.R_max}; cannot shift into [0, R_max]")
    return World(spec=spec, phi=phi, theta_plus=theta_plus, rho=rho, shift=-float(lin.min()))


def true_gap(world: World, x: int, y: int, yp: int) -> float:
    world._check_ids(x, y, yp)
    r = world.lin_reward
    return float(r[x, y] - r[x, yp])


def oracle_prob(world: World, x: int, y: int, yp: int) -> float:
    return sigmoid(true_gap(world, x, y, yp))


def sample_preference(world: World, x: int, y: int, yp: int, rng: np.random.Generator):
    """Draw a Bradley-Terry label. Returns ``(winner, loser, z)`` with z=+1 iff ``y`` won."""
    p = oracle_prob(world, x, y, yp)
    if rng.random() < p:
        return y, yp, 1
    return yp, y, -1


def diversity_matrix(world: World, pi: np.ndarray, pi_sam: np.ndarray) -> np.ndarray:
    """Exact E[psi psi^T] under x~rho, y~pi(.|x), y'~pi_sam(.|x)."""
    Psi = world.all_psi()
    w = world.rho[:, None, None] * pi[:, :, None] * pi_sam[:, None, :]
    return np.einsum("mab,mabi,mabj->ij", w, Psi, Psi)


# -- serialization -----------------------------------------------------------

def world_to_dict(world: World) -> dict:
    s = world.spec
    return {
        "format": WORLD_FORMAT,
        "version": WORLD_VERSION,
        "spec": {
            "num_prompts": s.num_prompts, "pool_size": s.pool_size, "feature_dim": s.feature_dim,
            "S": s.S, "R_max": s.R_max, "generator": s.generator, "seed": s.seed,
            "hidden_dim": s.hidden_dim, "center": s.center, "cluster_noise": s.cluster_noise,
        },
        "theta_plus": world.theta_plus.tolist(),
        "rho": world.rho.tolist(),
        "shift": world.shift,
        "phi": world.phi.tolist(),
    }


def save_world(world: World, path) -> None:
    text = json.dumps(world_to_dict(world), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8", newline="\n")


def load_world(path) -> World:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format") != WORLD_FORMAT:
        raise VersionMismatch(f"not a {WORLD_FORMAT} file")
    if data.get("version") != WORLD_VERSION:
        raise VersionMismatch(f"world file version {data.get('version')!r}, expected {WORLD_VERSION}")
    spec = WorldSpec(**data["spec"])
    spec.theta_plus = np.array(data["theta_plus"], dtype=np.float64)
    spec.prompt_weights = np.array(data["rho"], dtype=np.float64)
    return World(
        spec=spec,
        phi=np.array(data["phi"], dtype=np.float64),
        theta_plus=np.array(data["theta_plus"], dtype=np.float64),
        rho=np.array(data["rho"], dtype=np.float64),
        shift=float(data["shift"]),
    )


def null_world(spec: WorldSpec) -> World:
    """Same features as ``build_world(spec)`` but with theta_plus = 0."""
    base = build_world(spec)
    return World(spec=spec, phi=np.array(base.phi), theta_plus=np.zeros(base.d),
                 rho=np.array(base.rho), shift=0.0)


def world_from_arrays(phi: Sequence, theta_plus: Sequence, rho=None, R_max: float = 1.0) -> World:
    """Hand-built world for tests and examples; features are used as given."""
    phi = np.asarray(phi, dtype=np.float64)
    theta_plus = np.asarray(theta_plus, dtype=np.float64)
    M, K, d = phi.shape
    rho = np.full(M, 1.0 / M) if rho is None else np.asarray(rho, dtype=np.float64)
    spec = WorldSpec(num_prompts=M, pool_size=K, feature_dim=d, R_max=R_max,
                     S=max(math.sqrt(2) * float(np.linalg.norm(theta_plus)), 1e-12))
    lin = phi @ theta_plus
    return World(spec=spec, phi=phi, theta_plus=theta_plus, rho=rho, shift=-float(lin.min()))
