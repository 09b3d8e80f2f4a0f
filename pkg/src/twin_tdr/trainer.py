"""Training loop, evaluation, the Psi diagnostic and the rho sweep.

One environment step is followed by one critic update once the warm-up is over;
the actor and all target networks move every ``policy_update_frequency`` critic
updates. The vanilla algorithms (``td3``, ``d4pg``) take their own code path:
transitions go straight into the buffer, targets use the double-Q minimum and the
actor follows plain DPG.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .actor import (
    Actor,
    actor_td_error,
    dist_tdr_gradient,
    dpg_gradient,
    exploration_action,
    smoothed_target_action,
    tdr_gradient,
)
from .critic import TwinCritic, critic_loss_and_grads, dq_target, q_value, tdr_target
from .distributional import (
    DistTwinCritic,
    dist_critic_loss_and_grads,
    dist_dq_target_operator,
    dist_probs,
    dtdr_target_operator,
    expected_value,
    make_support,
)
from .envs import make_env, rollout_csv
from .errors import ConfigError, NonFiniteError, TrainingDiverged
from .nn import AdamState, adam_step, clip_grad_norm, save_checkpoint
from .replay import LnssWindow, ReplayBuffer, Transition

METRIC_FIELDS = (
    "step",
    "eval_return_mean",
    "eval_return_std",
    "psi_estimate",
    "critic_loss",
    "actor_grad_norm",
    "mean_delta",
    "wall_seconds",
)

SUCCESS_THRESHOLD = 10.0
FINAL_WINDOW = 5


@dataclass
class MetricsRow:
    step: int
    eval_return_mean: float
    eval_return_std: float
    psi_estimate: float
    critic_loss: float
    actor_grad_norm: float
    mean_delta: float
    wall_seconds: float

    def values(self):
        return [getattr(self, f) for f in METRIC_FIELDS]


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow([_fmt(v) for v in row.values()])
    return path


def read_metrics(path):
    with open(path, newline="") as fh:
        return [
            MetricsRow(int(r["step"]), *(float(r[f]) for f in METRIC_FIELDS[1:]))
            for r in csv.DictReader(fh)
        ]


def q1_estimate(critic, s, a):
    if isinstance(critic, DistTwinCritic):
        return expected_value(dist_probs(critic.z1, s, a), critic.support)
    return q_value(critic.q1, s, a)


def evaluate(actor, env, n_episodes, eval_seed):
    """Mean and std of undiscounted returns of the deterministic policy."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    returns = []
    for ep in range(n_episodes):
        obs = env.reset(eval_seed + ep).observation
        total, done = 0.0, False
        while not done:
            res = env.step(actor.act(obs))
            total += res.reward
            obs, done = res.next_observation, res.done
        returns.append(total)
    returns = np.array(returns)
    return float(returns.mean()), float(returns.std())


def estimate_psi(actor, critic, env, n_rollouts, gamma, seed, dump_dir=None):
    """Average of ``sum_t gamma^t r_t - Q1(s0, a0)`` over deterministic rollouts.

    Positive values mean the critic underestimates the return it predicts.
    ``dump_dir`` writes each rollout as CSV for independent checking.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    gaps = []
    for i in range(n_rollouts):
        obs = env.reset(seed + i).observation
        states, actions, rewards = [], [], []
        done = False
        while not done:
            a = actor.act(obs)
            res = env.step(a)
            states.append(obs)
            actions.append(a)
            rewards.append(res.reward)
            obs, done = res.next_observation, res.done
        ret = float(np.dot(gamma ** np.arange(len(rewards)), rewards))
        q0 = float(q1_estimate(critic, states[0][None], actions[0][None])[0])
        gaps.append(ret - q0)
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            rollout_csv(Path(dump_dir) / f"rollout_{i}.csv", np.array(states), np.array(actions), rewards)
    return float(np.mean(gaps))


class Trainer:
    """Holds all state of one run and advances it one environment step at a time."""

    def __init__(self, cfg, diag_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.diag_dir = diag_dir
        init_ss, explore_ss, sample_ss, smooth_ss, episode_ss = np.random.SeedSequence(cfg.seed).spawn(5)
        init_rng = np.random.default_rng(init_ss)
        self.explore_rng = np.random.default_rng(explore_ss)
        self.sample_rng = np.random.default_rng(sample_ss)
        self.smooth_rng = np.random.default_rng(smooth_ss)
        self.episode_rng = np.random.default_rng(episode_ss)

        self.env = make_env(cfg.env_config())
        self.eval_env = make_env(cfg.env_config())
        obs_dim, act_dim = self.env.obs_dim, self.env.act_dim
        rho = 0.0 if cfg.baseline else cfg.rho
        self.actor = Actor.create(obs_dim, act_dim, cfg.hidden, init_rng, rho, cfg.penalty_mode)
        if cfg.distributional:
            support = make_support(cfg.v_min, cfg.v_max, cfg.n_atoms)
            self.critic = DistTwinCritic.create(obs_dim, act_dim, cfg.hidden, init_rng, cfg.gamma, support)
        else:
            self.critic = TwinCritic.create(obs_dim, act_dim, cfg.hidden, init_rng, cfg.gamma)
        if cfg.init_scale != 1.0:
            # fan-in uniform init is linear in the scale, so rescaling equals drawing with it
            for net in self.networks().values():
                for p in net.parameters():
                    p *= cfg.init_scale
        on1, on2 = self.critic.online(1), self.critic.online(2)
        self.opt_c1 = AdamState.for_net(on1, cfg.learning_rate)
        self.opt_c2 = AdamState.for_net(on2, cfg.learning_rate)
        self.opt_pi = AdamState.for_net(self.actor.pi, cfg.learning_rate)

        self.buffer = ReplayBuffer(min(cfg.buffer_size, max(cfg.max_timesteps, 1)), obs_dim, act_dim)
        self.window = None if cfg.baseline else LnssWindow(cfg.lnss_n, cfg.gamma)
        self.t = 0
        self.total_it = 0
        self.obs = self._new_episode()
        self._losses, self._grad_norms, self._deltas = [], [], []

    def _new_episode(self):
        if self.window is not None:
            self.window.reset()
        return self.env.reset(int(self.episode_rng.integers(2**31))).observation

    # -- acting -------------------------------------------------------------------
    def step(self):
        """One environment step plus (after warm-up) one training iteration."""
        cfg = self.cfg
        if self.t < cfg.start_timesteps:
            a = self.explore_rng.uniform(-1.0, 1.0, size=self.env.act_dim) * self.actor.action_bound
        else:
            a = exploration_action(self.actor, self.obs, cfg.exploration_noise, self.explore_rng)
        res = self.env.step(a)
        if self.window is None:
            self.buffer.add(Transition(self.obs, a, res.reward, res.next_observation, res.done))
        else:
            self.window.push((self.obs, a, res.reward, res.next_observation, res.done), self.buffer, res.done)
        self.obs = self._new_episode() if res.done else res.next_observation
        if self.t >= cfg.start_timesteps and len(self.buffer) >= cfg.batch_size:
            self.train_iteration()
        self.t += 1

    # -- learning -----------------------------------------------------------------
    def train_iteration(self):
        cfg = self.cfg
        self.total_it += 1
        b = self.buffer.sample(cfg.batch_size, self.sample_rng)
        a_next = smoothed_target_action(self.actor, b.s_next, cfg.policy_noise, cfg.noise_clip, self.smooth_rng)
        try:
            if cfg.distributional:
                loss = self._dist_critic_update(b, a_next)
            else:
                loss = self._critic_update(b, a_next)
            self._losses.append(loss)
            if self.total_it % cfg.policy_update_frequency == 0:
                self._actor_update(b)
                self.critic.soft_update(cfg.tau)
                self.actor.soft_update(cfg.tau)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {self.t}: {exc}", self._diagnostic_checkpoint()) from exc

    def _critic_update(self, b, a_next):
        cfg = self.cfg
        if cfg.baseline or cfg.critic_target_rule == "dq":
            y = dq_target(b.r, b.s_next, a_next, self.critic)
        else:
            y = tdr_target(b.r, b.s, b.a, b.s_next, a_next, self.critic).y
        loss, g1, g2 = critic_loss_and_grads(b.s, b.a, y, self.critic)
        if not math.isfinite(loss):
            raise NonFiniteError(f"critic loss {loss}")
        adam_step(self.critic.q1, clip_grad_norm(g1, cfg.grad_clip), self.opt_c1)
        adam_step(self.critic.q2, clip_grad_norm(g2, cfg.grad_clip), self.opt_c2)
        return loss

    def _dist_critic_update(self, b, a_next):
        cfg = self.cfg
        if cfg.baseline or cfg.critic_target_rule == "dq":
            dec = dist_dq_target_operator(b.r, b.s_next, a_next, self.critic)
        else:
            dec = dtdr_target_operator(b.r, b.s, b.a, b.s_next, a_next, self.critic)
        loss, g1, g2, _ = dist_critic_loss_and_grads(b.s, b.a, dec.projected(self.critic.support), self.critic)
        if not math.isfinite(loss):
            raise NonFiniteError(f"critic loss {loss}")
        adam_step(self.critic.z1, clip_grad_norm(g1, cfg.grad_clip), self.opt_c1)
        adam_step(self.critic.z2, clip_grad_norm(g2, cfg.grad_clip), self.opt_c2)
        return loss

    def _actor_update(self, b):
        cfg = self.cfg
        if cfg.baseline:
            g, diag = dpg_gradient(b.s, self.actor, self.critic)
            diag.mean_delta = float(actor_td_error(b.s, b.r, b.s_next, self.actor, self.critic).mean())
        elif cfg.distributional:
            g, diag = dist_tdr_gradient(b.s, b.r, b.s_next, self.actor, self.critic)
        else:
            g, diag = tdr_gradient(b.s, b.r, b.s_next, self.actor, self.critic)
        adam_step(self.actor.pi, clip_grad_norm(g, cfg.grad_clip).scaled(-1.0), self.opt_pi)
        self._grad_norms.append(diag.grad_norm)
        if math.isfinite(diag.mean_delta):
            self._deltas.append(diag.mean_delta)

    # -- bookkeeping --------------------------------------------------------------
    def networks(self):
        return {**self.actor.networks(), **self.critic.networks()}

    def checkpoint_meta(self):
        return {"config": self.cfg.to_dict(), "step": self.t, "total_it": self.total_it}

    def _diagnostic_checkpoint(self):
        out = self.diag_dir or os.environ.get("TWIN_TDR_OUTPUT_DIR")
        if out is None:
            return None
        path = Path(out) / f"diverged_seed{self.cfg.seed}_step{self.t}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        return save_checkpoint(path, self.networks(), self.checkpoint_meta())

    def metrics_row(self, wall_seconds):
        cfg = self.cfg
        mean, std = evaluate(self.actor, self.eval_env, cfg.eval_episodes, cfg.eval_seed)
        psi = estimate_psi(self.actor, self.critic, self.eval_env, cfg.psi_rollouts, cfg.gamma, cfg.eval_seed)

        def avg(xs):
            return float(np.mean(xs)) if xs else float("nan")

        row = MetricsRow(self.t, mean, std, psi, avg(self._losses), avg(self._grad_norms), avg(self._deltas),
                         wall_seconds if cfg.log_wall_time else 0.0)
        self._losses, self._grad_norms, self._deltas = [], [], []
        return row


@dataclass
class RunResult:
    rows: list
    trainer: Trainer
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None

    @property
    def final_return(self):
        return final_return(self.rows)


def final_return(rows, window=FINAL_WINDOW):
    """Mean evaluation return over the last ``window`` rows."""
    tail = rows[-window:]
    return float(np.mean([r.eval_return_mean for r in tail])) if tail else float("nan")


def run_training(cfg, out_dir=None, callback=None):
    """Run to ``max_timesteps``; evaluates at every ``eval_frequency`` boundary and at the end.

    ``callback(trainer)`` runs after every environment step. With ``out_dir`` the metrics CSV
    and the final checkpoint are written there, as is a diagnostic checkpoint if the run
    diverges (otherwise that goes to ``$TWIN_TDR_OUTPUT_DIR`` when set).
    """
    trainer = Trainer(cfg, out_dir)
    rows = []
    start = time.perf_counter()
    while trainer.t < cfg.max_timesteps:
        trainer.step()
        if callback is not None:
            callback(trainer)
        if trainer.t % cfg.eval_frequency == 0:
            rows.append(trainer.metrics_row(time.perf_counter() - start))
    if not rows or rows[-1].step != trainer.t:
        rows.append(trainer.metrics_row(time.perf_counter() - start))
    result = RunResult(rows, trainer)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.metrics_path = write_metrics(rows, out / "metrics.csv")
        result.checkpoint_path = save_checkpoint(out / "final.ckpt", trainer.networks(), trainer.checkpoint_meta())
        (out / "config.json").write_text(cfg.to_json())
    return result


def _sweep_cell(args):
    base, rho, seed, out_dir = args
    try:
        return rho, seed, run_training(replace(base, rho=rho, seed=seed), out_dir).rows, None
    except Exception as exc:  # recorded per cell; the sweep carries on
        return rho, seed, None, f"{type(exc).__name__}: {exc}"


AGG_FIELDS = (
    "rho", "step", "n_seeds",
    "return_mean", "return_std", "return_lo", "return_hi",
    "psi_mean", "psi_std", "psi_lo", "psi_hi",
)


def aggregate(cells):
    """Per (rho, step): mean, std and mean +/- 2 std of return and Psi over completed seeds."""
    table = {}
    for rho, _seed, rows, _err in cells:
        if rows is None:
            continue
        for r in rows:
            table.setdefault((rho, r.step), []).append((r.eval_return_mean, r.psi_estimate))
    out = []
    for (rho, step), vals in sorted(table.items()):
        v = np.array(vals)
        mean, std = v.mean(axis=0), v.std(axis=0)
        out.append({
            "rho": rho, "step": step, "n_seeds": len(vals),
            "return_mean": mean[0], "return_std": std[0],
            "return_lo": mean[0] - 2 * std[0], "return_hi": mean[0] + 2 * std[0],
            "psi_mean": mean[1], "psi_std": std[1],
            "psi_lo": mean[1] - 2 * std[1], "psi_hi": mean[1] + 2 * std[1],
        })
    return out


def run_sweep(base, rhos, seeds, out_dir, workers=1):
    """Independent runs for every (rho, seed); writes ``sweep.csv`` and ``failures.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not rhos or not seeds:
        raise ConfigError("a sweep needs at least one rho and one seed")
    jobs = [(base, float(rho), int(seed), out / f"rho{rho:g}_seed{seed}") for rho in rhos for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_sweep_cell, jobs))
    else:
        cells = [_sweep_cell(j) for j in jobs]
    agg = aggregate(cells)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGG_FIELDS)
        for row in agg:
            w.writerow([_fmt(row[f]) for f in AGG_FIELDS])
    with open(out / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho", "seed", "error"])
        for rho, seed, rows, err in cells:
            if rows is None:
                w.writerow([rho, seed, err])
    return agg, cells
