"""Deterministic policy and its gradient rules.

Every gradient function returns ``(grads, diagnostics)`` where ``grads`` is the
gradient of the objective to be *maximised*; callers descend on ``-grads``.

The TD-regularised objective is ``mean_k [Q1(s_k, pi(s_k)) - rho * Delta_k]`` with
``Delta_k = Q1(s_k, pi(s_k)) - r_k - gamma * Q1(s'_k, pi(s'_k))``. In the default
``through_bootstrap`` mode the policy is differentiated at both states, giving
``(1 - rho) * Q1(s, pi(s)) + rho * gamma * Q1(s', pi(s'))``. In ``detached_bootstrap``
mode the next-state term is a constant and the gradient is ``(1 - rho)`` times DPG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .critic import TwinCritic, _rows, _vec
from .distributional import (
    DistTwinCritic,
    expected_value,
    log_softmax,
    project,
    project_backward,
)
from .errors import ConfigError
from .nn import MlpNet, backward, forward, soft_update

PENALTY_MODES = ("through_bootstrap", "detached_bootstrap")


def check_rho(rho):
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"rho must lie in [0, 1), got {rho}")
    return float(rho)


@dataclass
class Actor:
    pi: MlpNet
    pi_target: MlpNet
    rho: float = 0.7
    penalty_mode: str = "through_bootstrap"

    def __post_init__(self):
        check_rho(self.rho)
        if self.penalty_mode not in PENALTY_MODES:
            raise ConfigError(f"penalty_mode must be one of {PENALTY_MODES}, got {self.penalty_mode!r}")
        if self.pi.head != "tanh" or self.pi.dims != self.pi_target.dims:
            raise ConfigError("actor needs a tanh head and a congruent target network")

    @classmethod
    def create(cls, obs_dim, act_dim, hidden, rng, rho=0.7, penalty_mode="through_bootstrap", action_bound=1.0):
        pi = MlpNet.create([obs_dim, *hidden, act_dim], rng, head="tanh", action_bound=action_bound)
        return cls(pi, pi.copy(), rho, penalty_mode)

    @property
    def action_bound(self):
        return self.pi.action_bound

    def act(self, s):
        return forward(self.pi, s)

    def soft_update(self, tau):
        soft_update(self.pi_target, self.pi, tau)

    def networks(self):
        return {"pi": self.pi, "pi_target": self.pi_target}


@dataclass
class ActorDiagnostics:
    mean_q: float
    mean_delta: float
    grad_norm: float


def exploration_action(actor, s, std, rng):
    """Online action plus N(0, std * bound) noise, clipped to the bound."""
    a = actor.act(s)
    b = actor.action_bound
    return np.clip(a + rng.normal(0.0, std * b, size=np.shape(a)), -b, b)


def smoothed_target_action(actor, s_next, noise_std, noise_clip, rng):
    """Target-policy action with clipped Gaussian smoothing noise."""
    a = forward(actor.pi_target, _rows(s_next))
    b = actor.action_bound
    if noise_std > 0.0:
        noise = np.clip(rng.normal(0.0, noise_std * b, size=a.shape), -noise_clip * b, noise_clip * b)
        a = a + noise
    return np.clip(a, -b, b)


def _critic_net(critic):
    if isinstance(critic, TwinCritic):
        return critic.q1
    if isinstance(critic, DistTwinCritic):
        return critic.z1
    raise ConfigError(f"unsupported critic type {type(critic).__name__}")


def _q1_and_action_cot(critic, s, a, weight):
    """Q1 at (s, a) and the cotangent of ``weight * sum_k Q1(s_k, a_k)`` w.r.t. the actions."""
    net = _critic_net(critic)
    x = np.concatenate([s, a], axis=1)
    out, cache = forward(net, x, return_cache=True)
    if isinstance(critic, DistTwinCritic):
        q = expected_value(out, critic.support)
        cot = np.broadcast_to(weight * critic.support, out.shape)
    else:
        q = out[:, 0]
        cot = np.full_like(out, weight)
    _, dx = backward(net, cache, cot, param_grads=False)
    return q, dx[:, s.shape[1]:]


def _policy_backward(actor, parts):
    """Sum of actor parameter gradients for ``[(states, action_cotangent), ...]``."""
    total = None
    for s, cot in parts:
        g, _ = backward(actor.pi, s, cot)
        total = g if total is None else total + g
    return total


def actor_td_error(s, r, s_next, actor, critic):
    """``Q1(s, pi(s)) - r - gamma * Q1(s', pi(s'))`` with the online critic and policy."""
    net = _critic_net(critic)
    s, s_next = _rows(s), _rows(s_next)

    def q(states):
        out = forward(net, np.concatenate([states, forward(actor.pi, states)], axis=1))
        return expected_value(out, critic.support) if isinstance(critic, DistTwinCritic) else out[:, 0]

    return q(s) - _vec(r) - critic.gamma * q(s_next)


def dpg_gradient(s, actor, critic):
    """Gradient of ``mean_k Q1(s_k, pi(s_k))`` (expected value for distributional critics)."""
    s = _rows(s)
    n = s.shape[0]
    a = forward(actor.pi, s)
    q, da = _q1_and_action_cot(critic, s, a, 1.0 / n)
    g = _policy_backward(actor, [(s, da)])
    return g, ActorDiagnostics(float(q.mean()), float("nan"), g.norm())


def _tdr_grad(s, r, s_next, actor, critic, rho, mode):
    s, s_next, r = _rows(s), _rows(s_next), _vec(r)
    n = s.shape[0]
    a, a_next = forward(actor.pi, s), forward(actor.pi, s_next)
    q, da = _q1_and_action_cot(critic, s, a, (1.0 - rho) / n)
    q_next, da_next = _q1_and_action_cot(critic, s_next, a_next, rho * critic.gamma / n)
    if mode == "detached_bootstrap":
        g = dpg_gradient(s, actor, critic)[0].scaled(1.0 - rho)
    else:
        g = _policy_backward(actor, [(s, da), (s_next, da_next)])
    delta = q - r - critic.gamma * q_next
    return g, ActorDiagnostics(float(q.mean()), float(delta.mean()), g.norm())


def tdr_gradient(s, r, s_next, actor, critic):
    """Gradient of ``mean_k [Q1(s_k, pi(s_k)) - rho * Delta_k]`` using ``actor.rho`` and ``actor.penalty_mode``."""
    rho = check_rho(actor.rho)
    if rho == 0.0:
        g, diag = dpg_gradient(s, actor, critic)
        diag.mean_delta = float(actor_td_error(s, r, s_next, actor, critic).mean())
        return g, diag
    return _tdr_grad(s, r, s_next, actor, critic, rho, actor.penalty_mode)


def _dist_tdr_grad(s, r, s_next, actor, critic, rho, mode):
    s, s_next, r = _rows(s), _rows(s_next), _vec(r)
    n, obs_dim = s.shape
    z = critic.support
    net = critic.z1
    a, a_next = forward(actor.pi, s), forward(actor.pi, s_next)

    p, cache = forward(net, np.concatenate([s, a], axis=1), return_cache=True)
    log_p = log_softmax(cache.preacts[-1])
    p_next, cache_next = forward(net, np.concatenate([s_next, a_next], axis=1), return_cache=True)
    atoms = r[:, None] + critic.gamma * z[None, :]
    m = project(atoms, p_next, z)

    # current state: d/dlogits of mean[E p + rho * sum m log p]
    pg = (p * z + rho * m) / n
    cot_logits = pg - p * pg.sum(axis=1, keepdims=True)
    _, dx = backward(net, cache, cot_logits, wrt="logits", param_grads=False)
    parts = [(s, dx[:, obs_dim:])]

    if mode == "through_bootstrap":
        # next state: m depends on pi(s') through the (linear) projection of Z1(s', pi(s'))
        log_m = np.log(np.where(m > 0, m, 1.0))
        g_m = np.where(m > 0, -rho / n * (log_m + 1.0 - log_p), 0.0)
        cot_next = project_backward(atoms, z, g_m)
        _, dx_next = backward(net, cache_next, cot_next, param_grads=False)
        parts.append((s_next, dx_next[:, obs_dim:]))

    g = _policy_backward(actor, parts)
    q, q_next = expected_value(p, z), expected_value(p_next, z)
    delta = q - r - critic.gamma * q_next
    return g, ActorDiagnostics(float(q.mean()), float(delta.mean()), g.norm())


def dist_actor_objective(s, r, s_next, actor, critic, rho):
    """``mean_k [E Z1(s_k, pi(s_k)) - rho * KL(proj(r_k + gamma Z1(s'_k, pi(s'_k))) || Z1(s_k, pi(s_k)))]``."""
    s, s_next, r = _rows(s), _rows(s_next), _vec(r)
    z = critic.support
    x = np.concatenate([s, forward(actor.pi, s)], axis=1)
    _, cache = forward(critic.z1, x, return_cache=True)
    log_p = log_softmax(cache.preacts[-1])
    p_next = forward(critic.z1, np.concatenate([s_next, forward(actor.pi, s_next)], axis=1))
    m = project(r[:, None] + critic.gamma * z[None, :], p_next, z)
    kl = np.sum(np.where(m > 0, m * (np.log(np.where(m > 0, m, 1.0)) - log_p), 0.0), axis=1)
    return float(np.mean(np.exp(log_p) @ z - rho * kl))


def dist_tdr_gradient(s, r, s_next, actor, critic):
    """Distributional TD-regularised gradient; a KL penalty takes the place of Delta."""
    if not isinstance(critic, DistTwinCritic):
        raise ConfigError("dist_tdr_gradient needs a distributional critic")
    rho = check_rho(actor.rho)
    if rho == 0.0:
        g, diag = dpg_gradient(s, actor, critic)
        diag.mean_delta = float(actor_td_error(s, r, s_next, actor, critic).mean())
        return g, diag
    return _dist_tdr_grad(s, r, s_next, actor, critic, rho, actor.penalty_mode)
