"""Monte-Carlo and closed-form checks of the estimation-bias results.

The oracle is a constant-reward self-loop chain: every state-action has true value
``Q = r / (1 - gamma)``. A biased target critic adds ``Psi = mu / (1 - gamma) + noise``,
drawn independently at every evaluation, so its TD error on a transition is
``gamma * Psi(s') - Psi(s)`` with mean ``-mu``.

The actor results are checked on a one-dimensional landscape
``Q(a) = c - (a - a_star)^2`` with a linear actor ``a = phi`` and a bias field
``Psi(a) = psi(a) / (1 - gamma)``, ``psi(a) = sign * (b0 + b1 * (a - phi))``.
On this landscape the true part of the actor TD error cancels, leaving
``Delta(a) = psi(a)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class BiasScenario:
    mu1: float
    mu2: float
    gamma: float = 0.5
    noise_width: float = 0.1
    n_samples: int = 100_000
    reward: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.noise_width < 0.0:
            raise ConfigError("noise width must be non-negative")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")

    @property
    def deterministic(self):
        return self.noise_width == 0.0

    @property
    def label(self):
        return f"mu=({self.mu1:+g},{self.mu2:+g})"


class TabularOracle:
    """Draws biased target-critic values on the chain; the true value is known in closed form."""

    def __init__(self, scenario, rng):
        self.sc = scenario
        self.rng = rng

    @property
    def q_true(self):
        return self.sc.reward / (1.0 - self.sc.gamma)

    def cumulative_bias(self, mu, n):
        base = mu / (1.0 - self.sc.gamma)
        w = self.sc.noise_width
        if w == 0.0:
            return np.full(n, base)
        return base + self.rng.uniform(-w, w, size=n)

    def draw(self):
        """Target values ``(q1_sa, q1_next, q2_sa, q2_next)`` for ``n_samples`` transitions."""
        n, qt = self.sc.n_samples, self.q_true
        return tuple(qt + self.cumulative_bias(mu, n) for mu in (self.sc.mu1, self.sc.mu1, self.sc.mu2, self.sc.mu2))


def _mean_se(x):
    n = x.size
    se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(x.mean()), se


@dataclass
class Lemma1Report:
    scenario: BiasScenario
    mean_delta1: float
    mean_delta2: float
    se1: float
    se2: float

    @property
    def passed(self):
        if self.scenario.deterministic:
            return (abs(self.mean_delta1 + self.scenario.mu1) <= 1e-12
                    and abs(self.mean_delta2 + self.scenario.mu2) <= 1e-12)
        return (abs(self.mean_delta1 + self.scenario.mu1) <= 3 * self.se1
                and abs(self.mean_delta2 + self.scenario.mu2) <= 3 * self.se2)


def lemma1_check(scenario, seed=0):
    """Empirical mean target TD errors against ``-mu1`` and ``-mu2``."""
    oracle = TabularOracle(scenario, np.random.default_rng(seed))
    q1, q1n, q2, q2n = oracle.draw()
    r, g = scenario.reward, scenario.gamma
    m1, se1 = _mean_se(r + g * q1n - q1)
    m2, se2 = _mean_se(r + g * q2n - q2)
    return Lemma1Report(scenario, m1, m2, se1, se2)


@dataclass
class Theorem1Row:
    scenario: BiasScenario
    err_tdr: float
    err_dq: float
    stderr: float
    pick1_tdr: float
    pick1_dq: float

    @property
    def passed(self):
        return abs(self.err_tdr) <= abs(self.err_dq) + 3.0 * self.stderr + 1e-12

    @property
    def strict(self):
        return abs(self.err_tdr) < abs(self.err_dq) - 3.0 * self.stderr


def target_errors(scenario, seed=0):
    """Mean ``Q_true - y`` for both bootstrap rules on one scenario."""
    oracle = TabularOracle(scenario, np.random.default_rng(seed))
    q1, q1n, q2, q2n = oracle.draw()
    r, g = scenario.reward, scenario.gamma
    d1, d2 = r + g * q1n - q1, r + g * q2n - q2
    pick1 = np.abs(d1) <= np.abs(d2)
    y_tdr = r + g * np.where(pick1, q1n, q2n)
    y_dq = r + g * np.minimum(q1n, q2n)
    e_tdr, se_tdr = _mean_se(oracle.q_true - y_tdr)
    e_dq, se_dq = _mean_se(oracle.q_true - y_dq)
    return Theorem1Row(scenario, e_tdr, e_dq, math.hypot(se_tdr, se_dq),
                       float(pick1.mean()), float((q1n <= q2n).mean()))


def scenario_grid(gamma=0.5, noise_width=0.05, n_samples=100_000, magnitudes=(0.1, 0.3)):
    """The four bias orderings (with ``E[Q'1] < E[Q'2]``) plus their mirror images with the critics swapped."""
    small, large = magnitudes
    base = [(-large, -small), (-large, small), (-small, large), (small, large)]
    pairs = base + [(b, a) for a, b in base]
    return [BiasScenario(a, b, gamma, noise_width, n_samples) for a, b in pairs]


def theorem1_check(grid=None, seed=0):
    grid = scenario_grid() if grid is None else grid
    return [target_errors(sc, seed + i) for i, sc in enumerate(grid)]


def write_theorem1_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "err_tdr", "err_dq", "stderr", "pass"])
        for row in rows:
            w.writerow([row.scenario.label, repr(row.err_tdr), repr(row.err_dq), repr(row.stderr), int(row.passed)])
    return path


def remark3_check(gamma, mu, rho, noise_width=0.0, n_samples=1, seed=0):
    """Empirical ``E[Psi - rho * Delta]`` on the chain with a constant per-step bias ``mu``.

    ``Delta = Q1(s) - r - gamma * Q1(s')`` reduces to ``Psi(s) - gamma * Psi(s')``.
    """
    sc = BiasScenario(mu, mu, gamma, noise_width, n_samples)
    oracle = TabularOracle(sc, np.random.default_rng(seed))
    psi_now = oracle.cumulative_bias(mu, n_samples)
    psi_next = oracle.cumulative_bias(mu, n_samples)
    q_true = oracle.q_true
    q_now, q_next = q_true + psi_now, q_true + psi_next
    delta = q_now - sc.reward - gamma * q_next
    return float(np.mean(psi_now - rho * delta))


@dataclass
class Landscape:
    """``Q_true(a) = c - (a - a_star)^2`` and a linear bias field around the current parameter ``phi``."""

    a_star: float
    phi: float
    gamma: float
    sign: float
    b0: float
    b1: float
    c: float = 0.0

    def q_true(self, a):
        return self.c - (a - self.a_star) ** 2

    def grad_true(self, a):
        return -2.0 * (a - self.a_star)

    def psi(self, a, b0=None, b1=None):
        b0 = self.b0 if b0 is None else b0
        b1 = self.b1 if b1 is None else b1
        return self.sign * (b0 + b1 * (a - self.phi))

    def biased_q(self, a, b0=None, b1=None):
        return self.q_true(a) + self.psi(a, b0, b1) / (1.0 - self.gamma)


def parameter_steps(land, rho, alpha, slope_draws):
    """Actor steps ``(true, tdr, dpg)`` for each sampled bias slope; the TDR step uses ``Delta = psi``."""
    g_true = land.grad_true(land.phi)
    g_psi = land.sign * np.asarray(slope_draws, dtype=np.float64)
    scale = 1.0 / (1.0 - land.gamma)
    true = np.full_like(g_psi, alpha * g_true)
    dpg = alpha * (g_true + scale * g_psi)
    tdr = alpha * (g_true + (scale - rho) * g_psi)
    return true, tdr, dpg


@dataclass
class OrderingReport:
    bias_sign: float
    rho: float
    n_trials: int
    param_fraction: float
    value_fraction: float

    @property
    def passed(self):
        return self.param_fraction >= 0.99 and self.value_fraction >= 0.99


def random_landscape(rng, bias_sign):
    """A trial landscape whose parameter sits below both the true and the biased optimum.

    The margin keeps every candidate step on the rising side of both value curves, which
    is where the value ordering is meaningful (a step that overshoots the optimum can
    reverse it regardless of the update rule).
    """
    gamma = rng.uniform(0.5, 0.9)
    b0 = rng.uniform(0.5, 1.0)
    b1 = rng.uniform(0.1, 0.5)
    a_star = rng.uniform(-1.0, 1.0)
    a_biased = a_star + bias_sign * b1 / (1.0 - gamma) / 2.0
    phi = min(a_star, a_biased) - rng.uniform(0.5, 1.5)
    return Landscape(a_star, phi, gamma, bias_sign, b0, b1, c=rng.uniform(-1.0, 1.0))


def theorem2_3_check(bias_sign, rho=0.7, n_trials=1000, n_draws=200, alpha=0.05, slope_noise=0.05,
                     intercept_noise=0.2, seed=0):
    """Fraction of randomized trials in which both orderings hold in expectation over bias draws."""
    if bias_sign not in (-1, 1):
        raise ConfigError("bias_sign must be -1 (under) or +1 (over)")
    rng = np.random.default_rng(seed)
    ok_param = ok_value = 0
    for _ in range(n_trials):
        land = random_landscape(rng, bias_sign)
        slopes = land.b1 + rng.uniform(-slope_noise, slope_noise, n_draws)
        b0s = land.b0 + rng.uniform(-intercept_noise, intercept_noise, n_draws)
        true, tdr, dpg = parameter_steps(land, rho, alpha, slopes)
        e_true, e_tdr, e_dpg = true.mean(), tdr.mean(), dpg.mean()
        if bias_sign > 0:
            ok_param += e_true <= e_tdr <= e_dpg
        else:
            ok_param += e_true >= e_tdr >= e_dpg
        v_dpg = land.biased_q(land.phi + dpg, b0s, slopes).mean()
        v_tdr = land.biased_q(land.phi + tdr, b0s, slopes).mean()
        v_true = land.q_true(land.phi + true).mean()
        if bias_sign > 0:
            ok_value += v_dpg >= v_tdr >= v_true
        else:
            ok_value += v_dpg <= v_tdr <= v_true
    return OrderingReport(float(bias_sign), rho, n_trials, ok_param / n_trials, ok_value / n_trials)


def format_report(lemma_reports, theorem_rows, remark_rows, orderings):
    """Plain-text summary of a full bias-lab run."""
    lines = ["Mean target TD error vs -mu"]
    for rep in lemma_reports:
        lines.append(
            f"  {rep.scenario.label:18s} d1={rep.mean_delta1:+.5f} d2={rep.mean_delta2:+.5f} "
            f"{'PASS' if rep.passed else 'FAIL'}"
        )
    lines.append("Target error |E[Q - y]|: tdr vs dq")
    for row in theorem_rows:
        lines.append(
            f"  {row.scenario.label:18s} tdr={abs(row.err_tdr):.5f} dq={abs(row.err_dq):.5f} "
            f"se={row.stderr:.2e} {'PASS' if row.passed else 'FAIL'}"
        )
    lines.append("E[Psi - rho * Delta] (constant bias)")
    for gamma, mu, rho, value in remark_rows:
        lines.append(f"  gamma={gamma:g} mu={mu:+g} rho={rho:.4g} -> {value:+.6g}")
    lines.append("Actor update / value orderings")
    for rep in orderings:
        kind = "over" if rep.bias_sign > 0 else "under"
        lines.append(
            f"  {kind:5s} rho={rep.rho:g}: parameter {rep.param_fraction:.1%}, value {rep.value_fraction:.1%} "
            f"{'PASS' if rep.passed else 'FAIL'}"
        )
    return "\n".join(lines)


def run_bias_lab(seed=0, n_samples=100_000, noise_width=0.05, n_trials=1000, rho=0.7):
    """Every check at its default size; returns ``(report_text, theorem_rows, all_passed)``."""
    grid = scenario_grid(noise_width=noise_width, n_samples=n_samples)
    lemma = [lemma1_check(sc, seed + i) for i, sc in enumerate(grid)]
    rows = theorem1_check(grid, seed)
    remark = []
    for gamma, mu in ((0.5, 0.3), (0.9, -0.2)):
        for r in (0.0, rho, 1.0 / (1.0 - gamma)):
            remark.append((gamma, mu, r, remark3_check(gamma, mu, r)))
    orderings = [theorem2_3_check(s, rho, n_trials, seed=seed + k) for k, s in enumerate((1, -1))]
    ok = all(x.passed for x in lemma) and all(x.passed for x in rows) and all(o.passed for o in orderings)
    return format_report(lemma, rows, remark, orderings), rows, ok
