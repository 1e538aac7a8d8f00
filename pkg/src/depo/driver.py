"""End-to-end online loop, exact preference regret and run diagnostics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .estimator import (RadiusBuffer, SIGMA_PRIME_FLOOR, empirical_width, eta,
                        fit_mle_arrays, local_curvature)
from .mathcore import CovarianceState, potential_bound, sigmoid_prime
from .policy import (PairCounts, PolicyTriple, SoftmaxPolicy, TrainConfig, check_enumeration,
                     exact_objective, optimize_policy, pruned_objective,
                     refresh_sampler)
from .world import ConfigError, World, diversity_matrix, sample_preference

ARMS = ("depo", "passive", "uniform_bonus")
WIDTH_MODES = ("proxy", "theoretical")
KAPPA_MODES = ("true", "plugin")
OBJECTIVES = ("pruned", "exact")

CSV_COLUMNS = ("t", "prompt_id", "y", "yprime", "winner", "regret_inc", "cum_regret", "bonus",
               "r_bar", "width_gamma", "beta_conf_true", "kappa_true", "B_t", "lambda_min",
               "quad_form", "coverage_ok", "objective")
EXTRA_COLUMNS = ("regret_inc_refreshed",)

STREAMS = {"prompt": 1, "policy": 2, "sampler": 3, "oracle": 4}


@dataclass
class RunConfig:
    T: int = 2000
    beta: float = 0.03
    alpha: float = math.ceil(math.sqrt(2000))
    lam: float = 1.0
    H: int = 50
    c_b: float = 0.02
    epsilon: float = 1e-3
    buffer_capacity: int = 512
    gd_steps: int = 50
    gd_lr: float = 0.5
    delta: float = 0.1
    width_mode: str = "proxy"
    kappa_mode: str = "true"
    # "pruned": sampled-pair surrogate; "exact": enumerated expectation over (x, y, y')
    objective: str = "pruned"
    # use V_{t-1} instead of V_t inside the median radius
    radius_prev_cov: bool = False
    diagnostics: bool = True
    report_refreshed_regret: bool = False

    def validate(self) -> list[str]:
        errs = []
        if self.T < 0:
            errs.append("T: must be >= 0")
        for name in ("beta", "lam", "c_b", "epsilon", "gd_lr"):
            if not getattr(self, name) > 0:
                errs.append(f"{name}: must be > 0")
        if self.alpha < 0:
            errs.append("alpha: must be >= 0")
        for name in ("H", "buffer_capacity"):
            if getattr(self, name) < 1:
                errs.append(f"{name}: must be >= 1")
        if self.gd_steps < 0:
            errs.append("gd_steps: must be >= 0")
        if not 0 < self.delta < 1:
            errs.append("delta: must lie in (0, 1)")
        if self.width_mode not in WIDTH_MODES:
            errs.append(f"width_mode: must be one of {WIDTH_MODES}")
        if self.objective not in OBJECTIVES:
            errs.append(f"objective: must be one of {OBJECTIVES}")
        if self.kappa_mode not in KAPPA_MODES:
            errs.append(f"kappa_mode: must be one of {KAPPA_MODES}")
        return errs

    def train_config(self, alpha: Optional[float] = None) -> TrainConfig:
        return TrainConfig(beta=self.beta, alpha=self.alpha if alpha is None else alpha,
                           H=self.H, gd_steps=self.gd_steps, gd_lr=self.gd_lr)


@dataclass
class RoundRecord:
    t: int
    prompt_id: int
    y: int
    yprime: int
    winner: int
    regret_increment: float
    bonus_value: float
    r_bar: float
    width_gamma: float
    beta_conf_true: float
    kappa_true: float
    B_t: float
    lambda_min_V: float
    quad_form_t: float
    coverage_ok: bool
    objective_value: float
    regret_increment_refreshed: float = float("nan")


@dataclass
class RunTrace:
    rounds: list = field(default_factory=list)
    cumulative_regret: float = 0.0
    potential_sum: float = 0.0
    config: dict = field(default_factory=dict)
    seed: int = 0
    arm: str = "depo"
    D: int = 0
    lam: float = 1.0
    final_lambda_min: float = float("nan")
    newton_failures: int = 0

    @property
    def T(self) -> int:
        return len(self.rounds)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rounds], dtype=np.float64)

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.column("regret_increment"))


# -- policies and regret -----------------------------------------------------

def comparator_policy(world: World) -> np.ndarray:
    """One-hot (M, K) policy on the best response of each prompt; ties go to the lowest id."""
    best = np.argmax(world.lin_reward, axis=1)
    pi = np.zeros((world.M, world.K))
    pi[np.arange(world.M), best] = 1.0
    return pi


def regret_increment(world: World, pi_star, pi_t, pi_sam, pref: Optional[np.ndarray] = None) -> float:
    """Exact E[P*(y* > y'|x) - P*(y_t > y'|x)] with x~rho, y*~pi*, y_t~pi_t, y'~pi_sam."""
    check_enumeration(world)
    P = world.pref_matrix() if pref is None else pref
    diff = np.asarray(pi_star) - np.asarray(pi_t)
    # diff rows sum to zero, so centering P at 1/2 changes nothing but makes ties exact zeros
    per_prompt = np.einsum("mk,mkj,mj->m", diff, P - 0.5, np.asarray(pi_sam))
    return float(world.rho @ per_prompt)


def diversity_gamma(world: World, pi, pi_sam) -> float:
    check_enumeration(world)
    return float(np.linalg.eigvalsh(diversity_matrix(world, np.asarray(pi), np.asarray(pi_sam)))[0])


# -- the online loop ---------------------------------------------------------

def _streams(seed: int) -> dict:
    return {name: np.random.default_rng(np.random.SeedSequence([seed, sid]))
            for name, sid in STREAMS.items()}


def _draw(probs: np.ndarray, u: float) -> int:
    # inverse CDF with exactly one uniform per draw so paired arms stay aligned
    k = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(k, len(probs) - 1)


class _MLEData:
    """Counts of (x, y, y', z) so the MLE runs on at most 2 M K^2 distinct rows."""

    def __init__(self, world: World):
        self.psi = world.all_psi().reshape(-1, world.D)
        self.pos = np.zeros(world.M * world.K * world.K)
        self.neg = np.zeros_like(self.pos)
        self.K = world.K

    def add(self, x, y, yp, z):
        i = (x * self.K + y) * self.K + yp
        (self.pos if z > 0 else self.neg)[i] += 1

    def arrays(self):
        ip, ineg = np.nonzero(self.pos)[0], np.nonzero(self.neg)[0]
        Psi = np.concatenate([self.psi[ip], self.psi[ineg]])
        z = np.concatenate([np.ones(len(ip)), -np.ones(len(ineg))])
        w = np.concatenate([self.pos[ip], self.neg[ineg]])
        return Psi, z, w


def run_arm(world: World, cfg: RunConfig, seed: int, arm: str = "depo") -> RunTrace:
    """Run the online preference-optimization loop for one arm.

    ``depo`` uses the elliptical bonus, ``uniform_bonus`` the same objective with
    the bonus fixed at zero, ``passive`` drops the exploration term (alpha = 0).
    """
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}")
    errs = cfg.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    check_enumeration(world)
    M, K, D = world.M, world.K, world.D
    alpha = 0.0 if arm == "passive" else cfg.alpha
    tcfg = cfg.train_config(alpha)
    rng = _streams(seed)

    pref = world.pref_matrix()
    gaps = world.gap_matrix()
    all_psi = world.all_psi()
    pi_star = comparator_policy(world)
    triple = PolicyTriple.start(M, K)
    pi_fixed = triple.sampler.probs()
    ref_logp = triple.reference.log_probs()

    state = CovarianceState(D, cfg.lam)
    buffer = RadiusBuffer(cfg.buffer_capacity)
    wl_counts, pair_counts = PairCounts(M, K), PairCounts(M, K)
    mle = _MLEData(world)
    theta_hat = np.zeros(D)
    seen_wl = np.zeros((M, K, K), dtype=bool)
    B_t = 0.0
    width_prev = _width_at(cfg, state, buffer, kappa=0.25, S=world.spec.S)

    trace = RunTrace(config=asdict(cfg), seed=seed, arm=arm, D=D, lam=cfg.lam)
    cum = 0.0
    for t in range(1, cfg.T + 1):
        triple = refresh_sampler(triple, t, cfg.H)
        pi_t, pi_sam = triple.current.probs(), triple.sampler.probs()
        x = _draw(world.rho, rng["prompt"].random())
        y = _draw(pi_t[x], rng["policy"].random())
        yp = _draw(pi_sam[x], rng["sampler"].random())
        w, l, z = sample_preference(world, x, y, yp, rng["oracle"])

        reg = regret_increment(world, pi_star, pi_t, pi_fixed, pref)
        reg_ref = (regret_increment(world, pi_star, pi_t, pi_sam, pref)
                   if cfg.report_refreshed_regret else float("nan"))

        psi_wl = all_psi[x, w, l]
        psi_pol = all_psi[x, y, yp]
        bonus_prev = width_prev * math.sqrt(state.quad_form(psi_pol)) if arm == "depo" else 0.0
        if cfg.radius_prev_cov:
            buffer.append(psi_wl)
            r_bar, width_gamma, _ = empirical_width(buffer, state, cfg.c_b, cfg.epsilon)
            q = state.update(psi_wl)
        else:
            q = state.update(psi_wl)
            buffer.append(psi_wl)
            r_bar, width_gamma, _ = empirical_width(buffer, state, cfg.c_b, cfg.epsilon)

        B_t = max(B_t, abs(float(gaps[x, w, l])))
        kappa_true = float(sigmoid_prime(B_t))
        eta_t = eta(state, world.spec.S, cfg.delta)
        beta_true = eta_t / max(kappa_true, SIGMA_PRIME_FLOOR)

        seen_wl[x, w, l] = True
        mle.add(x, y, yp, z)
        coverage_ok = True
        kappa_plugin = 0.25
        if cfg.diagnostics or (cfg.width_mode == "theoretical" and cfg.kappa_mode == "plugin"):
            Psi, zz, ww = mle.arrays()
            est = fit_mle_arrays(Psi, zz, cfg.lam, warm_start=theta_hat, weights=ww)
            theta_hat = est.theta_hat
            trace.newton_failures += int(not est.converged)
            kappa_plugin, _, _ = local_curvature(theta_hat, all_psi[seen_wl])
            err = abs(float(gaps[x, y, yp]) - float(theta_hat @ psi_pol))
            coverage_ok = bool(err <= beta_true * math.sqrt(state.quad_form(psi_pol)))

        if cfg.width_mode == "proxy":
            width = width_gamma
        else:
            kappa = kappa_true if cfg.kappa_mode == "true" else kappa_plugin
            width = eta_t / max(kappa, SIGMA_PRIME_FLOOR)
        width_prev = width

        wl_counts.add(x, w, l)
        pair_counts.add(x, y, yp)
        if arm == "depo":
            b_grid = width * np.sqrt(state.quad_forms(all_psi))
        else:
            b_grid = np.zeros((M, K, K))

        if cfg.objective == "pruned":
            def objective(L, _b=b_grid):
                return pruned_objective(L, ref_logp, wl_counts, pair_counts, _b, alpha, cfg.beta)
        else:
            def objective(L, _b=b_grid, _ps=pi_sam):
                return exact_objective(L, ref_logp, wl_counts, _ps, world.rho, _b, alpha, cfg.beta)

        new_policy, obj_val = optimize_policy(triple.current, objective, tcfg)
        triple = PolicyTriple(current=new_policy, reference=triple.reference, sampler=triple.sampler)

        cum += reg
        trace.rounds.append(RoundRecord(
            t=t, prompt_id=x, y=y, yprime=yp, winner=w, regret_increment=reg,
            bonus_value=bonus_prev, r_bar=r_bar, width_gamma=width_gamma,
            beta_conf_true=beta_true, kappa_true=kappa_true, B_t=B_t,
            lambda_min_V=state.min_eigenvalue(), quad_form_t=q, coverage_ok=coverage_ok,
            objective_value=obj_val, regret_increment_refreshed=reg_ref,
        ))
        trace.potential_sum += q
    trace.cumulative_regret = cum
    trace.final_lambda_min = state.min_eigenvalue()
    return trace


def _width_at(cfg: RunConfig, state: CovarianceState, buffer: RadiusBuffer, kappa: float, S: float) -> float:
    if cfg.width_mode == "proxy":
        return empirical_width(buffer, state, cfg.c_b, cfg.epsilon)[1]
    return eta(state, S, cfg.delta) / kappa


def run_depo(world: World, cfg: RunConfig, seed: int) -> RunTrace:
    return run_arm(world, cfg, seed, "depo")


def run_baseline(world: World, cfg: RunConfig, seed: int, mode: str) -> RunTrace:
    if mode not in ("passive", "uniform_bonus"):
        raise ConfigError(f"unknown baseline mode {mode!r}")
    return run_arm(world, cfg, seed, mode)


# -- coverage study ----------------------------------------------------------

def run_planted_coverage(world: World, T: int, lam: float, delta: float, seed: int,
                         probe: np.ndarray) -> dict:
    """Check |true gap - estimated gap| <= beta_conf ||psi||_{V_t^{-1}} on a probe set at every round.

    Pairs are drawn from uniform policies; the width uses the true local curvature.
    ``probe`` is an (n, 3) integer array of (x, y, y') triples.
    """
    rng = _streams(seed)
    M, K, D = world.M, world.K, world.D
    all_psi = world.all_psi()
    gaps = world.gap_matrix()
    probe_psi = all_psi[probe[:, 0], probe[:, 1], probe[:, 2]]
    probe_gap = gaps[probe[:, 0], probe[:, 1], probe[:, 2]]
    state = CovarianceState(D, lam)
    mle = _MLEData(world)
    theta = np.zeros(D)
    B = 0.0
    first_violation = None
    violations = 0
    for t in range(1, T + 1):
        x = _draw(world.rho, rng["prompt"].random())
        y = int(rng["policy"].integers(K))
        yp = int(rng["sampler"].integers(K))
        w, l, z = sample_preference(world, x, y, yp, rng["oracle"])
        state.update(all_psi[x, w, l])
        mle.add(x, y, yp, z)
        B = max(B, abs(float(gaps[x, y, yp])))
        Psi, zz, ww = mle.arrays()
        theta = fit_mle_arrays(Psi, zz, lam, warm_start=theta, weights=ww).theta_hat
        width = eta(state, world.spec.S, delta) / max(float(sigmoid_prime(B)), SIGMA_PRIME_FLOOR)
        err = np.abs(probe_gap - probe_psi @ theta)
        bad = err > width * np.sqrt(state.quad_forms(probe_psi))
        if bad.any():
            violations += 1
            if first_violation is None:
                first_violation = t
    return {"violated": first_violation is not None, "first_violation": first_violation,
            "violating_rounds": violations}


# -- reports -----------------------------------------------------------------

def decomposition_report(trace: RunTrace, alpha: float) -> dict:
    """Empirical regret decomposition: regret vs a quarter of the summed bonuses, plus potential check."""
    T = trace.T
    if T == 0:
        return {"T": 0, "cumulative_regret": 0.0, "quarter_bonus_sum": 0.0, "ratio": 0.0,
                "exploitation_residual": 0.0, "potential_sum": 0.0, "potential_bound": 0.0,
                "potential_ok": True, "potential_violations": [], "alpha": alpha}
    q = trace.column("quad_form_t")
    prefix = np.cumsum(q)
    ts = np.arange(1, T + 1)
    bounds = 2.0 * trace.D * np.log1p(ts / (trace.lam * trace.D))
    bad = [int(t) for t in ts[prefix > bounds]]
    cum = float(trace.column("regret_increment").sum())
    qb = 0.25 * float(trace.column("bonus_value").sum())
    return {
        "T": T, "alpha": alpha, "cumulative_regret": cum, "quarter_bonus_sum": qb,
        "ratio": cum / qb if qb > 0 else float("inf") if cum > 0 else 0.0,
        "exploitation_residual": cum - qb,
        "potential_sum": float(prefix[-1]),
        "potential_bound": potential_bound(trace.D, T, trace.lam),
        "potential_ok": not bad, "potential_violations": bad,
    }


def check_invariants(trace: RunTrace) -> list[str]:
    """Hard invariants of a completed trace; returns human-readable failures."""
    fails = []
    if trace.T == 0:
        return fails
    rep = decomposition_report(trace, trace.config.get("alpha", 0.0))
    if not rep["potential_ok"]:
        fails.append(f"elliptical potential bound violated at round {rep['potential_violations'][0]}")
    inc = trace.column("regret_increment")
    if np.any(np.abs(inc) > 1):
        t = int(np.argmax(np.abs(inc) > 1)) + 1
        fails.append(f"regret increment outside [-1, 1] at round {t}")
    if abs(inc.sum() - trace.cumulative_regret) > 1e-9:
        fails.append("cumulative regret does not match the sum of increments")
    if np.any(trace.column("quad_form_t") < 0):
        fails.append("negative quadratic form")
    B, kap = trace.column("B_t"), trace.column("kappa_true")
    if np.any(np.diff(B) < 0):
        fails.append(f"B_t decreased at round {int(np.argmax(np.diff(B) < 0)) + 2}")
    if np.any(np.diff(kap) > 0):
        fails.append(f"kappa_true increased at round {int(np.argmax(np.diff(kap) > 0)) + 2}")
    return fails


# -- CSV ---------------------------------------------------------------------

def fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def trace_rows(trace: RunTrace, refreshed: bool = False):
    cum = 0.0
    for r in trace.rounds:
        cum += r.regret_increment
        row = [r.t, r.prompt_id, r.y, r.yprime, r.winner, r.regret_increment, cum, r.bonus_value,
               r.r_bar, r.width_gamma, r.beta_conf_true, r.kappa_true, r.B_t, r.lambda_min_V,
               r.quad_form_t, r.coverage_ok, r.objective_value]
        if refreshed:
            row.append(r.regret_increment_refreshed)
        yield [fmt(v) for v in row]


def trace_to_csv(trace: RunTrace) -> str:
    refreshed = bool(trace.config.get("report_refreshed_regret"))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS + (EXTRA_COLUMNS if refreshed else ()))
    wr.writerows(trace_rows(trace, refreshed))
    return buf.getvalue()


def write_trace_csv(trace: RunTrace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(trace_to_csv(trace))


def read_trace_csv(path, D: int, lam: float, alpha: float = 0.0) -> RunTrace:
    """Rebuild a trace from its CSV; ``D`` and ``lam`` come from the summary sidecar."""
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = tuple(next(rd))
        if header[:len(CSV_COLUMNS)] != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header in {path}")
        rows = list(rd)
    trace = RunTrace(D=D, lam=lam, config={"alpha": alpha})
    for row in rows:
        v = dict(zip(header, row))
        trace.rounds.append(RoundRecord(
            t=int(v["t"]), prompt_id=int(v["prompt_id"]), y=int(v["y"]), yprime=int(v["yprime"]),
            winner=int(v["winner"]), regret_increment=float(v["regret_inc"]),
            bonus_value=float(v["bonus"]), r_bar=float(v["r_bar"]),
            width_gamma=float(v["width_gamma"]), beta_conf_true=float(v["beta_conf_true"]),
            kappa_true=float(v["kappa_true"]), B_t=float(v["B_t"]),
            lambda_min_V=float(v["lambda_min"]), quad_form_t=float(v["quad_form"]),
            coverage_ok=v["coverage_ok"] == "1", objective_value=float(v["objective"]),
        ))
    trace.cumulative_regret = float(sum(r.regret_increment for r in trace.rounds))
    trace.potential_sum = float(sum(r.quad_form_t for r in trace.rounds))
    return trace


def round_record_fields() -> list[str]:
    return [f.name for f in fields(RoundRecord)]


def summary_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"
