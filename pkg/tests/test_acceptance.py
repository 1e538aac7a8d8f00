"""Acceptance criteria, one test per criterion.

Every test records a single ``criterion N: PASS|FAIL|FLAGGED`` line that is
printed in the terminal summary. Long multi-seed runs are shared through
session fixtures; the whole module takes roughly 15 minutes on one core.
"""
import math
import time

import numpy as np
import pytest

from depo.cli import parse_config, run_experiment
from depo.driver import RunConfig, diversity_gamma, run_arm, run_planted_coverage
from depo.estimator import fit_mle_arrays, logistic_objective
from depo.mathcore import CovarianceState, potential_bound
from depo.policy import (PairCounts, SoftmaxPolicy, bonus_term, depo_exact_bonus,
                         depo_pruned_objective, dpo_loss, dpo_term, exact_bonus_term,
                         pair_bonus_grid, pruned_objective, sampled_bonus)
from depo.world import WorldSpec, build_world

from conftest import brute_force_2d, planted, random_unit_rows, report
from test_policy import fd_check, random_records

pytestmark = pytest.mark.acceptance

T_MAIN = 2000
SEEDS = range(20)


@pytest.fixture(scope="session")
def main_world():
    return build_world(WorldSpec())


@pytest.fixture(scope="session")
def main_cfg():
    # diagnostics do not influence the trajectory in proxy-width mode; they are off for speed
    return RunConfig(T=T_MAIN, alpha=float(math.ceil(math.sqrt(T_MAIN))), diagnostics=False)


@pytest.fixture(scope="session")
def depo_runs(main_world, main_cfg):
    t0 = time.perf_counter()
    traces = [run_arm(main_world, main_cfg, seed=s, arm="depo") for s in SEEDS]
    return traces, time.perf_counter() - t0


@pytest.fixture(scope="session")
def baseline_runs(main_world, main_cfg):
    return {arm: [run_arm(main_world, main_cfg, seed=s, arm=arm) for s in SEEDS]
            for arm in ("passive", "uniform_bonus")}


def test_criterion_1_sherman_morrison():
    rng = np.random.default_rng(101)
    D, n = 32, 10_000
    Psi = random_unit_rows(rng, n, D) * rng.uniform(0.1, 1.0, (n, 1))
    direct = np.eye(D) + Psi.T @ Psi
    inv_direct = np.linalg.inv(direct)
    logdet_direct = np.linalg.slogdet(direct)[1]
    results = {}
    t0 = time.perf_counter()
    for label, every in (("default", CovarianceState(D, 1.0).refresh_every), ("no-refresh", 0)):
        s = CovarianceState(D, 1.0, refresh_every=every)
        for psi in Psi:
            s.update(psi)
        results[label] = (np.max(np.abs(s.V_inv - inv_direct)), abs(s.logdet_V - logdet_direct))
    elapsed = (time.perf_counter() - t0) / 2
    ok = all(e < 1e-8 and l < 1e-6 for e, l in results.values()) and elapsed < 10
    detail = "; ".join(f"{k}: max|dVinv|={e:.2e} |dlogdet|={l:.2e}" for k, (e, l) in results.items())
    report(1, ok, f"{detail}; {elapsed:.2f}s per pass (limits 1e-8, 1e-6, 10s)")
    assert ok


def test_criterion_2_elliptical_potential():
    T, violations, worst = 5000, 0, 0.0
    for D in (4, 16):
        bound = potential_bound(D, T, 1.0)
        for k in range(50):
            rng = np.random.default_rng([D, k])
            s = CovarianceState(D, 1.0)
            total = sum(s.update(psi) for psi in random_unit_rows(rng, T, D))
            violations += total > bound
            worst = max(worst, total / bound)
    report(2, violations == 0, f"{violations} violations in 100 sequences; max sum/bound = {worst:.4f}")
    assert violations == 0


def test_criterion_3_mle():
    rng = np.random.default_rng(303)
    Psi, z = planted(80, np.array([1.0, -0.5, 0.3, 0.8]), 0)
    h, worst_fd = 1e-6, 0.0
    for _ in range(20):
        th = rng.standard_normal(4) * 2
        _, g = logistic_objective(th, Psi, z, 0.5)
        fd = np.array([(logistic_objective(th + h * e, Psi, z, 0.5)[0]
                        - logistic_objective(th - h * e, Psi, z, 0.5)[0]) / (2 * h) for e in np.eye(4)])
        worst_fd = max(worst_fd, np.max(np.abs(fd - g)) / np.max(np.abs(g)))

    worst_grid = 0.0
    for k in range(5):
        P2, z2 = planted(200, rng.uniform(-2, 2, 2), 10 + k)
        est = fit_mle_arrays(P2, z2, 0.1)
        worst_grid = max(worst_grid, np.max(np.abs(est.theta_hat - brute_force_2d(P2, z2, 0.1))))

    worst_warm = 0.0
    for k in range(5):
        P3, z3 = planted(300, rng.standard_normal(6), 20 + k)
        a = fit_mle_arrays(P3, z3, 1.0).theta_hat
        b = fit_mle_arrays(P3, z3, 1.0, warm_start=rng.standard_normal(6) * 5).theta_hat
        worst_warm = max(worst_warm, np.max(np.abs(a - b)))

    ok = worst_fd <= 1e-5 and worst_grid <= 1e-6 and worst_warm <= 1e-8
    report(3, ok, f"fd rel err {worst_fd:.1e} (<=1e-5); grid oracle {worst_grid:.1e} (<=1e-6); "
                  f"warm start {worst_warm:.1e} (<=1e-8)")
    assert ok


def test_criterion_4_coverage():
    t0 = time.perf_counter()
    runs, violated = 200, 0
    for k in range(runs):
        w = build_world(WorldSpec(feature_dim=3, seed=1000 + k))
        rng = np.random.default_rng(k)
        probe = np.stack([rng.integers(w.M, size=200), rng.integers(w.K, size=200),
                          rng.integers(w.K, size=200)], axis=1)
        violated += run_planted_coverage(w, T=1000, lam=1.0, delta=0.1, seed=k, probe=probe)["violated"]
    elapsed = time.perf_counter() - t0
    frac = violated / runs
    ok = frac <= 0.15 and elapsed < 300
    report(4, ok, f"violation fraction {frac:.3f} (<=0.15) over {runs} runs; {elapsed:.0f}s (<300s)")
    assert ok


def _ratio(trace):
    cum = trace.cumulative()
    T = len(cum)
    return (cum[-1] / T) / (cum[T // 4 - 1] / (T // 4))


def test_criterion_5_sublinear_regret(depo_runs):
    traces, elapsed = depo_runs
    T = T_MAIN
    early = np.mean([tr.cumulative()[T // 4 - 1] / (T // 4) for tr in traces])
    late = np.mean([tr.cumulative()[-1] / T for tr in traces])
    ratio = late / early
    per_seed = np.mean([_ratio(tr) for tr in traces])
    ok = ratio <= 0.6 and elapsed < 1200
    report(5, ok, f"(Reg_T/T)/(Reg_T/4/(T/4)) = {ratio:.3f} (<=0.6; per-seed mean {per_seed:.3f}); "
                  f"Reg_T mean {np.mean([tr.cumulative_regret for tr in traces]):.2f}; {elapsed:.0f}s (<1200s)")
    assert ok


def test_criterion_6_baseline_ordering(depo_runs, baseline_runs):
    depo = np.array([tr.cumulative_regret for tr in depo_runs[0]])
    passive = np.array([tr.cumulative_regret for tr in baseline_runs["passive"]])
    uniform = np.array([tr.cumulative_regret for tr in baseline_runs["uniform_bonus"]])
    mean_ok = depo.mean() <= passive.mean()
    frac = float(np.mean(depo <= uniform))
    ok = mean_ok and frac >= 0.6
    detail = (f"mean Reg_T depo {depo.mean():.2f} vs passive {passive.mean():.2f}; "
              f"depo <= uniform_bonus on {frac:.0%} of seeds (>=60%)")
    report(6, True if ok else "FLAGGED", detail)
    if not ok:
        # soft criterion: print per-seed diagnostics instead of failing
        for s, (a, b, c) in enumerate(zip(depo, passive, uniform)):
            print(f"  seed {s}: depo {a:.3f} passive {b:.3f} uniform_bonus {c:.3f}")


def test_criterion_7_diversity(depo_runs, main_world):
    u = np.full((main_world.M, main_world.K), 1.0 / main_world.K)
    gamma = diversity_gamma(main_world, u, u)
    lam_T = np.mean([tr.final_lambda_min for tr in depo_runs[0][:10]])
    target = 1.0 + 0.5 * gamma * T_MAIN
    growth_ok = lam_T >= target
    ratios = []
    for seed in range(10):
        kw = dict(num_prompts=16, pool_size=4, feature_dim=4, seed=seed)
        g = diversity_gamma(build_world(WorldSpec(**kw)), u, u)
        c = diversity_gamma(build_world(WorldSpec(generator="clustered", **kw)), u, u)
        ratios.append(g / c)
    cluster_ok = min(ratios) >= 5
    ok = growth_ok and cluster_ok
    report(7, ok, f"mean lambda_min(V_T) {lam_T:.2f} vs lambda + 0.5*gamma*T = {target:.2f} "
                  f"(gamma {gamma:.4f}); gaussian/clustered gamma ratio min {min(ratios):.1f} (>=5)")
    assert ok


def test_criterion_8_objectives():
    rng = np.random.default_rng(808)
    w = build_world(WorldSpec(num_prompts=3, pool_size=4, feature_dim=2, seed=8))
    s = CovarianceState(w.D, 1.0)
    for psi in random_unit_rows(rng, 10, w.D):
        s.update(psi)
    pol, ref = SoftmaxPolicy(rng.standard_normal((3, 4))), SoftmaxPolicy(rng.standard_normal((3, 4)))
    data = random_records(rng, 50, 3, 4)
    reduction = depo_pruned_objective(pol, ref, data, s, 0.7, 0.0, 0.1, w) == dpo_loss(pol, ref, data, 0.1)

    L = rng.standard_normal((3, 4)) * 2
    rl = ref.log_probs()
    wl = PairCounts(3, 4, rng.integers(0, 4, (3, 4, 4)).astype(float))
    pairs = PairCounts(3, 4, rng.integers(0, 4, (3, 4, 4)).astype(float))
    b = pair_bonus_grid(w, s, 0.7)
    sam = SoftmaxPolicy(rng.standard_normal((3, 4))).probs()
    grads = {
        "dpo": fd_check(lambda X: dpo_term(X, rl, wl, 0.5), L),
        "bonus": fd_check(lambda X: bonus_term(X, rl, pairs, b, 0.5), L),
        "pruned": fd_check(lambda X: pruned_objective(X, rl, wl, pairs, b, 45.0, 0.5), L),
        "exact": fd_check(lambda X: exact_bonus_term(X, rl, sam, w.rho, b, 0.5), L),
    }
    grad_ok = max(grads.values()) <= 1e-5

    sampler = SoftmaxPolicy(np.log(sam))
    exact = depo_exact_bonus(pol, sampler, ref, w, s, 0.7, 0.5)
    n = 10**5
    x = rng.choice(3, size=n, p=w.rho)
    cum_p, cum_s = np.cumsum(pol.probs(), axis=1), np.cumsum(sam, axis=1)
    u1, u2 = rng.random(n), rng.random(n)
    y = np.minimum((u1[:, None] >= cum_p[x]).sum(axis=1), 3)
    yp = np.minimum((u2[:, None] >= cum_s[x]).sum(axis=1), 3)
    mean, se = sampled_bonus(pol, ref, w, s, 0.7, 0.5, np.stack([x, y, yp], axis=1))
    mc_ok = abs(mean - exact) <= 3 * se

    ok = reduction and grad_ok and mc_ok
    report(8, ok, f"alpha=0 reduction exact: {reduction}; max fd rel err {max(grads.values()):.1e} (<=1e-5); "
                  f"MC {mean:.5f} vs exact {exact:.5f}, |diff|/se = {abs(mean - exact) / se:.2f} (<=3)")
    assert ok


def test_criterion_9_determinism(tmp_path):
    text = ("[world]\nseed = 0\n[train]\nT = 300\nalpha = sqrtT\n"
            "[experiment]\narms = depo passive uniform_bonus\nseeds = 0 1\noutput_dir = {}\n")
    outs = []
    for k in range(2):
        p = tmp_path / f"c{k}.ini"
        p.write_text(text.format(tmp_path / f"out{k}"))
        cfg = parse_config(p)
        assert run_experiment(cfg) == 0
        outs.append({f.name: f.read_bytes() for f in sorted((tmp_path / f"out{k}").glob("*.csv"))})
    same = outs[0] == outs[1] and len(outs[0]) == 7
    report(9, same, f"{len(outs[0])} CSV files compared byte-for-byte across two executions")
    assert same
