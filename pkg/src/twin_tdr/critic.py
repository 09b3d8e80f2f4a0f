"""Twin scalar Q critics and their two bootstrap rules.

``dq`` bootstraps from the smaller of the two target values. ``tdr`` computes each
target network's own TD error on the stored transition and bootstraps from the
network whose error is smaller in magnitude (ties go to network 1).

All functions are batched: ``r`` has shape (B,), states (B, obs_dim), actions
(B, act_dim). Scalars and single vectors are promoted to a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError
from .nn import MlpNet, backward, forward, soft_update


def _rows(x):
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _vec(x):
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


def q_value(net, s, a):
    """Scalar critic evaluated on a batch; returns shape (B,)."""
    return forward(net, np.concatenate([_rows(s), _rows(a)], axis=1))[:, 0]


@dataclass
class TwinCritic:
    q1: MlpNet
    q2: MlpNet
    q1_target: MlpNet
    q2_target: MlpNet
    gamma: float

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        for online, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            if online.dims != target.dims:
                raise ConfigError("online and target critic shapes differ")
        if self.q1.out_dim != 1 or self.q2.out_dim != 1:
            raise ConfigError("scalar critics need a single output")

    @classmethod
    def create(cls, obs_dim, act_dim, hidden, rng, gamma=0.99):
        dims = [obs_dim + act_dim, *hidden, 1]
        q1 = MlpNet.create(dims, rng)
        q2 = MlpNet.create(dims, rng)
        return cls(q1, q2, q1.copy(), q2.copy(), gamma)

    def online(self, which):
        return self.q1 if which == 1 else self.q2

    def target(self, which):
        return self.q1_target if which == 1 else self.q2_target

    def soft_update(self, tau):
        soft_update(self.q1_target, self.q1, tau)
        soft_update(self.q2_target, self.q2, tau)

    def networks(self):
        return {"q1": self.q1, "q2": self.q2, "q1_target": self.q1_target, "q2_target": self.q2_target}


@dataclass
class TargetDecision:
    y: np.ndarray
    chosen: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray


def dq_target(r, s_next, a_next, critic):
    """``r + gamma * min(Q'1, Q'2)`` at the next state-action."""
    q1 = q_value(critic.q1_target, s_next, a_next)
    q2 = q_value(critic.q2_target, s_next, a_next)
    return _vec(r) + critic.gamma * np.minimum(q1, q2)


def _target_terms(r, s, a, s_next, a_next, critic):
    r = _vec(r)
    boot = []
    deltas = []
    for which in (1, 2):
        net = critic.target(which)
        b = r + critic.gamma * q_value(net, s_next, a_next)
        boot.append(b)
        deltas.append(b - q_value(net, s, a))
    return boot, deltas


def target_td_errors(r, s, a, s_next, a_next, critic):
    """Per-network TD errors of the target critics on the stored transition."""
    _, (d1, d2) = _target_terms(r, s, a, s_next, a_next, critic)
    return d1, d2


def tdr_select(delta1, delta2):
    """Index (1 or 2) of the network with the smaller |TD error|; ties pick 1."""
    return np.where(np.abs(delta1) <= np.abs(delta2), 1, 2)


def tdr_target(r, s, a, s_next, a_next, critic):
    (b1, b2), (d1, d2) = _target_terms(r, s, a, s_next, a_next, critic)
    chosen = tdr_select(d1, d2)
    return TargetDecision(np.where(chosen == 1, b1, b2), chosen, d1, d2)


def critic_loss_and_grads(s, a, y, critic):
    """Mean over the batch of the summed twin squared errors; ``y`` is held constant.

    Returns ``(loss, grads_q1, grads_q2)``.
    """
    y = _vec(y)
    if not np.all(np.isfinite(y)):
        bad = np.flatnonzero(~np.isfinite(y))
        raise NonFiniteError(f"non-finite critic targets at batch rows {bad[:10].tolist()}")
    x = np.concatenate([_rows(s), _rows(a)], axis=1)
    if x.shape[0] != y.shape[0]:
        raise ConfigError(f"{y.shape[0]} targets for a batch of {x.shape[0]}")
    n = y.shape[0]
    loss = 0.0
    grads = []
    for net in (critic.q1, critic.q2):
        q, cache = forward(net, x, return_cache=True)
        err = q[:, 0] - y
        loss += float(err @ err) / n
        g, _ = backward(net, cache, (2.0 / n) * err[:, None])
        grads.append(g)
    return loss, grads[0], grads[1]
