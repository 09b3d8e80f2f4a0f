"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the pytest terminal summary.
Criteria 10 and 11 train 10 agents for 1e5 steps each and are marked ``slow``
(deselect with ``-m "not slow"``).
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from helpers import kink_margin, numeric_input_grad, numeric_param_grad, one_hot, record, rel_err
from test_critic import tabular_critic
from test_distributional import point_mass_critic
from twin_tdr.actor import Actor, _dist_tdr_grad, dist_actor_objective, dpg_gradient, tdr_gradient
from twin_tdr.biaslab import (
    BiasScenario,
    lemma1_check,
    remark3_check,
    scenario_grid,
    target_errors,
    theorem1_check,
    theorem2_3_check,
)
from twin_tdr.config import preset
from twin_tdr.critic import TwinCritic, critic_loss_and_grads, q_value, tdr_target
from twin_tdr.distributional import (
    DistTwinCritic,
    dist_critic_loss_and_grads,
    dtdr_target_operator,
    expected_value,
    make_support,
    project,
)
from twin_tdr.nn import backward, forward
from twin_tdr.replay import LnssWindow, ReplayBuffer, lnss_reward, lnss_tail_reward
from twin_tdr.trainer import SUCCESS_THRESHOLD, Trainer, final_return, run_training


# -- 1. gradient exactness --------------------------------------------------------

def _far_from_kinks(*pairs):
    return min(kink_margin(net, x) for net, x in pairs) > 1e-3


def _check_param_grads(net, analytic, objective):
    return max(rel_err(ga, gn) for ga, gn in zip(analytic.arrays(), numeric_param_grad(net, objective)))


def _critic_instance(rng):
    c = TwinCritic.create(3, 1, [8, 8], rng, 0.99)
    s, a, y = rng.normal(size=(4, 3)), rng.uniform(-1, 1, (4, 1)), rng.normal(size=4)
    x = np.concatenate([s, a], axis=1)
    if not _far_from_kinks((c.q1, x), (c.q2, x)):
        return None
    _, g1, g2 = critic_loss_and_grads(s, a, y, c)
    loss = lambda: critic_loss_and_grads(s, a, y, c)[0]
    param = max(_check_param_grads(c.q1, g1, loss), _check_param_grads(c.q2, g2, loss))
    _, dx = backward(c.q1, x, np.ones((4, 1)), param_grads=False)
    inp = rel_err(dx, numeric_input_grad(lambda z: float(forward(c.q1, z).sum()), x))
    return max(param, inp)


def _actor_net_instance(rng):
    actor = Actor.create(3, 2, [8, 8], rng, rho=0.0)
    s, cot = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    if not _far_from_kinks((actor.pi, s)):
        return None
    g, ds = backward(actor.pi, s, cot)
    fn = lambda z: float(np.sum(forward(actor.pi, z) * cot))
    return max(_check_param_grads(actor.pi, g, lambda: fn(s)), rel_err(ds, numeric_input_grad(fn, s)))


def _policy_setup(rng, critic):
    actor = Actor.create(3, 1, [8], rng, rho=float(rng.uniform(0.05, 0.95)))
    s, s2, r = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.uniform(size=4)
    net = critic.q1 if isinstance(critic, TwinCritic) else critic.z1
    xs = [np.concatenate([x, forward(actor.pi, x)], axis=1) for x in (s, s2)]
    if not _far_from_kinks((actor.pi, s), (actor.pi, s2), (net, xs[0]), (net, xs[1])):
        return None
    return actor, s, s2, r


def _dpg_instance(rng):
    critic = TwinCritic.create(3, 1, [16], rng, 0.9)
    setup = _policy_setup(rng, critic)
    if setup is None:
        return None
    actor, s, _, _ = setup
    g, _ = dpg_gradient(s, actor, critic)
    return _check_param_grads(actor.pi, g, lambda: float(q_value(critic.q1, s, forward(actor.pi, s)).mean()))


def _tdr_instance(rng):
    critic = TwinCritic.create(3, 1, [16], rng, 0.9)
    setup = _policy_setup(rng, critic)
    if setup is None:
        return None
    actor, s, s2, r = setup

    def objective():
        q = q_value(critic.q1, s, forward(actor.pi, s))
        q2 = q_value(critic.q1, s2, forward(actor.pi, s2))
        return float(np.mean(q - actor.rho * (q - r - critic.gamma * q2)))

    g, _ = tdr_gradient(s, r, s2, actor, critic)
    return _check_param_grads(actor.pi, g, objective)


def _dist_critic_instance(rng):
    support = make_support(0.0, 10.0, 11)
    c = DistTwinCritic.create(3, 1, [8], rng, 0.9, support)
    s, a = rng.normal(size=(4, 3)), rng.uniform(-1, 1, (4, 1))
    m = rng.dirichlet(np.ones(11), size=4)
    x = np.concatenate([s, a], axis=1)
    if not _far_from_kinks((c.z1, x), (c.z2, x)):
        return None
    _, g1, g2, _ = dist_critic_loss_and_grads(s, a, m, c)
    loss = lambda: dist_critic_loss_and_grads(s, a, m, c)[0]
    return max(_check_param_grads(c.z1, g1, loss), _check_param_grads(c.z2, g2, loss))


def _dist_actor_instance(rng):
    support = make_support(0.0, 10.0, 11)
    critic = DistTwinCritic.create(3, 1, [8], rng, 0.9, support)
    setup = _policy_setup(rng, critic)
    if setup is None:
        return None
    actor, s, s2, r = setup
    grid = (r[:, None] + 0.9 * support[None, :]) / (support[1] - support[0])
    if np.min(np.abs(grid - np.round(grid))) < 1e-3:  # projection kink
        return None
    g, _ = _dist_tdr_grad(s, r, s2, actor, critic, actor.rho, "through_bootstrap")
    return _check_param_grads(actor.pi, g, lambda: dist_actor_objective(s, r, s2, actor, critic, actor.rho))


def _collect(kind, n, rng):
    errs = []
    while len(errs) < n:
        e = kind(rng)
        if e is not None:
            errs.append(e)
    return errs


def test_01_gradient_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    exact = []
    for kind, n in ((_critic_instance, 25), (_actor_net_instance, 25), (_dpg_instance, 20),
                    (_tdr_instance, 20), (_dist_critic_instance, 15)):
        exact += _collect(kind, n, rng)
    dist_actor = _collect(_dist_actor_instance, 20, rng)
    elapsed = time.perf_counter() - t0
    ok = len(exact) >= 100 and max(exact) <= 1e-4 and max(dist_actor) <= 1e-3 and elapsed < 60
    record(1, "gradient exactness", ok,
           f"{len(exact)} instances max rel err {max(exact):.1e} (<=1e-4); "
           f"distributional actor {len(dist_actor)} instances {max(dist_actor):.1e} (<=1e-3); {elapsed:.1f}s")
    assert ok


# -- 2. LNSS suite ----------------------------------------------------------------

def test_02_lnss_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    fixed = max(abs(lnss_reward([c] * n, g) - c)
                for c, n, g in zip(rng.uniform(-5, 5, 200), rng.integers(1, 150, 200), rng.uniform(0.01, 0.999, 200)))
    identity = all(lnss_reward([r], g) == r for r, g in zip(rng.normal(size=200), rng.uniform(0.01, 0.99, 200)))
    tail_gap = 0.0
    counts_ok = True
    for _ in range(1000):
        T = int(rng.integers(1, 60))
        n = int(rng.integers(1, T + 1))
        gamma = float(rng.uniform(0.05, 0.995))
        rewards = rng.normal(size=T)
        for m in range(1, n + 1):
            tail_gap = max(tail_gap, abs(lnss_tail_reward(rewards[-m:], gamma) - lnss_reward(rewards[-m:], gamma)))
        window, buffer = LnssWindow(n, gamma), ReplayBuffer(T, 1, 1)
        emitted = sum(window.push((np.zeros(1), np.zeros(1), r, np.zeros(1), k == T - 1), buffer, k == T - 1)
                      for k, r in enumerate(rewards))
        counts_ok &= emitted == T == len(buffer) and len(window) == 0
    elapsed = time.perf_counter() - t0
    ok = fixed <= 1e-12 and identity and tail_gap <= 1e-12 and counts_ok and elapsed < 60
    record(2, "LNSS suite", ok,
           f"fixed point err {fixed:.1e}; N=1 identity {identity}; tail/window gap {tail_gap:.1e}; "
           f"T transitions per episode {counts_ok}; {elapsed:.1f}s")
    assert ok


# -- 3-6. bias lab ----------------------------------------------------------------

def test_03_target_error_ordering():
    t0 = time.perf_counter()
    rows = theorem1_check(scenario_grid(gamma=0.5, n_samples=100_000), seed=0)
    det = target_errors(BiasScenario(-0.3, -0.1, gamma=0.5, noise_width=0.0, n_samples=1))
    strict = abs(abs(det.err_tdr) - 0.1) <= 1e-12 and abs(abs(det.err_dq) - 0.3) <= 1e-12
    strict_cases = {(r.scenario.mu1, r.scenario.mu2) for r in rows if r.strict}
    elapsed = time.perf_counter() - t0
    ok = len(rows) == 8 and all(r.passed for r in rows) and strict and len(strict_cases) >= 4 and elapsed < 120
    worst = max(abs(r.err_tdr) - abs(r.err_dq) - 3 * r.stderr for r in rows)
    record(3, "TDR target error never exceeds double-Q", ok,
           f"8 scenarios, worst margin {worst:+.2e}; deterministic (-0.3,-0.1): "
           f"{abs(det.err_tdr):.3f} vs {abs(det.err_dq):.3f}; strict in {len(strict_cases)}; {elapsed:.1f}s")
    assert ok


def test_04_mean_target_td_error():
    t0 = time.perf_counter()
    stochastic = [lemma1_check(sc, seed=i) for i, sc in enumerate(scenario_grid(noise_width=0.1, n_samples=100_000))]
    deterministic = [lemma1_check(BiasScenario(m1, m2, gamma=g, noise_width=0.0, n_samples=1))
                     for m1, m2, g in ((0.3, -0.1, 0.5), (-0.2, 0.4, 0.9), (0.0, 0.25, 0.99))]
    exact = max(max(abs(r.mean_delta1 + r.scenario.mu1), abs(r.mean_delta2 + r.scenario.mu2)) for r in deterministic)
    elapsed = time.perf_counter() - t0
    ok = all(r.passed for r in stochastic) and exact <= 1e-12 and elapsed < 60
    record(4, "mean target TD error equals minus the bias", ok,
           f"{sum(r.passed for r in stochastic)}/8 stochastic within 3 stderr; deterministic err {exact:.1e}; "
           f"{elapsed:.1f}s")
    assert ok


def test_05_regularised_bias_cancellation():
    t0 = time.perf_counter()
    cancel, bounded = 0.0, True
    for gamma, mu in ((0.5, 0.3), (0.9, -0.2), (0.99, 0.05), (0.7, -1.0)):
        cancel = max(cancel, abs(remark3_check(gamma, mu, 1.0 / (1.0 - gamma))))
        psi = abs(remark3_check(gamma, mu, 0.0))
        for rho in np.linspace(0.0, 1.0 / (1.0 - gamma), 11)[1:]:
            bounded &= abs(remark3_check(gamma, mu, rho)) <= psi + 1e-12
    elapsed = time.perf_counter() - t0
    ok = cancel <= 1e-10 and bounded and elapsed < 10
    record(5, "TD penalty cancels constant bias", ok,
           f"|E[psi - rho delta]| at rho=1/(1-gamma): {cancel:.1e}; bounded by |E[psi]| on 10-point grid: "
           f"{bounded}; {elapsed:.2f}s")
    assert ok


def test_06_update_and_value_orderings():
    t0 = time.perf_counter()
    reports = [theorem2_3_check(sign, rho=0.7, n_trials=1000, seed=5) for sign in (1, -1)]
    elapsed = time.perf_counter() - t0
    ok = all(r.passed for r in reports) and elapsed < 120
    detail = "; ".join(f"{'over' if r.bias_sign > 0 else 'under'}: parameter {r.param_fraction:.1%}, "
                       f"value {r.value_fraction:.1%}" for r in reports)
    record(6, "parameter and value orderings", ok, f"{detail}; {elapsed:.1f}s")
    assert ok


# -- 7. distributional suite ------------------------------------------------------

def test_07_distributional_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    support = make_support(0.0, 50.0, 51)
    norm_err, mean_err = 0.0, 0.0
    for _ in range(200):
        gamma, r = rng.uniform(0.0, 0.99), rng.uniform(-10, 60)
        p = rng.dirichlet(np.ones(51))
        atoms = r + gamma * support
        out = project(atoms[None], p[None], support)[0]
        norm_err = max(norm_err, abs(out.sum() - 1.0))
        inside = rng.uniform(0, 50, size=20)
        q = rng.dirichlet(np.ones(20))
        mean_err = max(mean_err, abs(expected_value(project(inside[None], q[None], support), support)[0] - inside @ q))

    agree = total = 0
    small = make_support(0.0, 40.0, 41)
    while total < 1000:
        n, b, gamma = 6, 50, 0.5
        t1 = rng.integers(0, 41, n).astype(float)
        t2 = rng.integers(0, 41, n).astype(float)
        dc, sc = point_mass_critic(t1, t2, small, gamma), tabular_critic(t1, t2, gamma)
        si, ni = rng.integers(0, n, b), rng.integers(0, n, b)
        r = rng.integers(0, 10, b) + rng.choice([0.0, 0.25, 0.5], b)
        args = (r, one_hot(si, n), np.zeros((b, 1)), one_hot(ni, n), np.zeros((b, 1)))
        agree += int(np.sum(dtdr_target_operator(*args, dc).source == tdr_target(*args, sc).chosen))
        total += b
    elapsed = time.perf_counter() - t0
    ok = norm_err <= 1e-9 and mean_err <= 0.5 + 1e-12 and agree == total and elapsed < 60
    record(7, "distributional suite", ok,
           f"normalisation err {norm_err:.1e}; mean shift {mean_err:.3f} (<=0.5 spacing); "
           f"selection agreement {agree}/{total}; {elapsed:.1f}s")
    assert ok


# -- 8-9. trainer ----------------------------------------------------------------

def _param_trace(cfg, steps):
    tr = Trainer(cfg)
    trace = []
    for _ in range(steps):
        tr.step()
        trace.append(b"".join(p.tobytes() for n in sorted(tr.networks()) for p in tr.networks()[n].parameters()))
    return trace, tr


def test_08_reduction_to_baseline():
    t0 = time.perf_counter()
    common = dict(start_timesteps=200, max_timesteps=1000, seed=3)
    base, tb = _param_trace(preset("desk", "td3", **common), 1000)
    red, tr = _param_trace(preset("desk", "td3_tdr", rho=0.0, critic_target_rule="dq", lnss_n=1, **common), 1000)
    same = sum(a == b for a, b in zip(base, red))
    elapsed = time.perf_counter() - t0
    # updates start once the buffer holds a batch of 256: steps 255..999
    ok = same == 1000 and tb.total_it == tr.total_it == 745 and elapsed < 120
    record(8, "reduction to vanilla TD3", ok,
           f"{same}/1000 steps bitwise identical over {tb.total_it} updates; {elapsed:.1f}s")
    assert ok


def test_09_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = preset("desk", "td3_tdr", max_timesteps=6000, start_timesteps=1000, eval_frequency=1000, seed=11)
    a = run_training(cfg, tmp_path / "a").metrics_path.read_bytes()
    b = run_training(cfg, tmp_path / "b").metrics_path.read_bytes()
    elapsed = time.perf_counter() - t0
    ok = a == b and elapsed < 300
    record(9, "determinism", ok, f"metrics CSVs {'identical' if a == b else 'DIFFER'} ({len(a)} bytes); "
                                 f"{elapsed:.1f}s")
    assert ok


# -- 10-11. desk-scale training ---------------------------------------------------

SEEDS = range(5)


def _desk_run(job):
    algorithm, seed = job
    cfg = preset("desk", algorithm, seed=seed)
    t0 = time.perf_counter()
    rows = run_training(cfg).rows
    return algorithm, seed, rows, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_runs():
    jobs = [(alg, seed) for alg in ("td3", "td3_tdr") for seed in SEEDS]
    with ProcessPoolExecutor(max_workers=os.cpu_count() or 1) as pool:
        results = list(pool.map(_desk_run, jobs))
    return {(alg, seed): (rows, secs) for alg, seed, rows, secs in results}


def _late_abs_psi(rows):
    cutoff = 0.75 * rows[-1].step
    return float(np.mean([abs(r.psi_estimate) for r in rows if r.step > cutoff]))


@pytest.mark.slow
def test_10_sparse_pendulum_direction(desk_runs):
    summary = {}
    for alg in ("td3", "td3_tdr"):
        finals = [final_return(desk_runs[(alg, s)][0]) for s in SEEDS]
        summary[alg] = (float(np.mean(finals)), float(np.mean([f >= SUCCESS_THRESHOLD for f in finals])), finals)
    (m_b, s_b, f_b), (m_t, s_t, f_t) = summary["td3"], summary["td3_tdr"]
    slowest = max(secs for _, secs in desk_runs.values())
    ok = m_t >= m_b and s_t >= s_b and (m_t > m_b or s_t > s_b) and slowest <= 1800
    record(10, "sparse pendulum: TDR-TD3 vs TD3", ok,
           f"mean final return {m_t:.2f} vs {m_b:.2f}; success rate {s_t:.0%} vs {s_b:.0%} "
           f"(per seed TDR {[round(f, 1) for f in f_t]}, TD3 {[round(f, 1) for f in f_b]}); "
           f"slowest run {slowest / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_11_psi_direction(desk_runs):
    tdr = float(np.mean([_late_abs_psi(desk_runs[("td3_tdr", s)][0]) for s in SEEDS]))
    base = float(np.mean([_late_abs_psi(desk_runs[("td3", s)][0]) for s in SEEDS]))
    ok = math.isfinite(tdr) and tdr <= base
    record(11, "late-training |psi|: rho=0.7 vs rho=0", ok, f"{tdr:.3f} vs {base:.3f} averaged over 5 seeds")
    assert ok
