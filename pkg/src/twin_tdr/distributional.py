"""Categorical distributional twin critics.

Each critic maps ``(s, a)`` to probabilities over a fixed, evenly spaced atom
support. Target selection reuses the scalar rule on expectations; the chosen
target network's next-state distribution is shifted to ``r + gamma * z`` and
projected back onto the support, and the critics minimise cross-entropy to it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .critic import _rows, _vec, tdr_select
from .errors import ConfigError, NonFiniteError
from .nn import MlpNet, backward, forward, soft_update


def make_support(v_min=0.0, v_max=100.0, n_atoms=51):
    if n_atoms < 2:
        raise ConfigError("a categorical support needs at least two atoms")
    if not v_max > v_min:
        raise ConfigError(f"v_max ({v_max}) must exceed v_min ({v_min})")
    return np.linspace(v_min, v_max, n_atoms)


@dataclass
class CategoricalDist:
    probs: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.support = np.asarray(self.support, dtype=np.float64)
        if self.probs.shape[-1] != self.support.shape[0]:
            raise ConfigError("probabilities and support differ in length")
        if np.any(np.diff(self.support) <= 0):
            raise ConfigError("support must be strictly increasing")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=-1) - 1.0) > 1e-9):
            raise ConfigError("probabilities must be non-negative and sum to 1")

    def mean(self):
        return expected_value(self.probs, self.support)


def expected_value(probs, support):
    """``sum_i p_i z_i`` along the last axis."""
    return np.asarray(probs, dtype=np.float64) @ np.asarray(support, dtype=np.float64)


def _projection_weights(atoms, support):
    """Cell index and linear weights for each (clamped) atom.

    Returns ``(lo, w_lo, w_hi, inside)``; mass goes to ``lo`` and ``lo + 1``. An atom sitting
    exactly on a grid point is assigned to the cell on its left, so its whole mass lands on
    the upper end of that cell. ``inside`` flags atoms not clamped to the boundary.
    """
    v_min, v_max = support[0], support[-1]
    dz = (v_max - v_min) / (len(support) - 1)
    x = np.asarray(atoms, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite target atoms")
    inside = (x > v_min) & (x < v_max)
    b = (np.clip(x, v_min, v_max) - v_min) / dz
    lo = np.clip(np.ceil(b).astype(np.int64) - 1, 0, len(support) - 2)
    w_hi = np.clip(b - lo, 0.0, 1.0)
    return lo, 1.0 - w_hi, w_hi, inside


def project(atoms, probs, support):
    """Linear projection of ``(atoms, probs)`` onto ``support``; batched over leading rows."""
    atoms = np.atleast_2d(atoms)
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n_rows, n = probs.shape[0], len(support)
    lo, w_lo, w_hi, _ = _projection_weights(atoms, support)
    offset = (np.arange(n_rows) * n)[:, None]
    flat = np.bincount((lo + offset).ravel(), (probs * w_lo).ravel(), n_rows * n)
    flat += np.bincount((lo + 1 + offset).ravel(), (probs * w_hi).ravel(), n_rows * n)
    out = flat.reshape(n_rows, n)
    return out / out.sum(axis=1, keepdims=True)


def project_backward(atoms, support, cot_out):
    """Pull a cotangent on the projected probabilities back to the source probabilities.

    The projection is linear in the probabilities (atoms held fixed), so this is the
    transpose: each source atom gathers the cotangent of the two cells it feeds.
    """
    atoms = np.atleast_2d(atoms)
    lo, w_lo, w_hi, _ = _projection_weights(atoms, support)
    rows = np.arange(atoms.shape[0])[:, None]
    return w_lo * cot_out[rows, lo] + w_hi * cot_out[rows, lo + 1]


def dist_probs(net, s, a):
    return forward(net, np.concatenate([_rows(s), _rows(a)], axis=1))


@dataclass
class DistTwinCritic:
    z1: MlpNet
    z2: MlpNet
    z1_target: MlpNet
    z2_target: MlpNet
    gamma: float
    support: np.ndarray

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.float64)
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        for online, target in ((self.z1, self.z1_target), (self.z2, self.z2_target)):
            if online.dims != target.dims:
                raise ConfigError("online and target critic shapes differ")
            if online.head != "softmax" or online.out_dim != len(self.support):
                raise ConfigError("distributional critics need a softmax head over the support")

    @classmethod
    def create(cls, obs_dim, act_dim, hidden, rng, gamma=0.99, support=None):
        support = make_support() if support is None else np.asarray(support, dtype=np.float64)
        dims = [obs_dim + act_dim, *hidden, len(support)]
        z1 = MlpNet.create(dims, rng, head="softmax")
        z2 = MlpNet.create(dims, rng, head="softmax")
        return cls(z1, z2, z1.copy(), z2.copy(), gamma, support)

    def online(self, which):
        return self.z1 if which == 1 else self.z2

    def target(self, which):
        return self.z1_target if which == 1 else self.z2_target

    def q_value(self, which, s, a, target=False):
        net = self.target(which) if target else self.online(which)
        return expected_value(dist_probs(net, s, a), self.support)

    def soft_update(self, tau):
        soft_update(self.z1_target, self.z1, tau)
        soft_update(self.z2_target, self.z2, tau)

    def networks(self):
        return {"z1": self.z1, "z2": self.z2, "z1_target": self.z1_target, "z2_target": self.z2_target}


@dataclass
class DistTargetDecision:
    source: np.ndarray
    atoms: np.ndarray
    probs: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray

    def projected(self, support):
        return project(self.atoms, self.probs, support)


def _next_and_current(r, s, a, s_next, a_next, critic):
    r = _vec(r)
    nxt, deltas = [], []
    for which in (1, 2):
        net = critic.target(which)
        p_next = dist_probs(net, s_next, a_next)
        deltas.append(r + critic.gamma * expected_value(p_next, critic.support)
                      - expected_value(dist_probs(net, s, a), critic.support))
        nxt.append(p_next)
    return r, nxt, deltas


def dist_target_td_errors(r, s, a, s_next, a_next, critic):
    _, _, (d1, d2) = _next_and_current(r, s, a, s_next, a_next, critic)
    return d1, d2


def _shifted(r, probs, source, critic, d1, d2):
    atoms = r[:, None] + critic.gamma * critic.support[None, :]
    return DistTargetDecision(source, atoms, probs, d1, d2)


def dtdr_target_operator(r, s, a, s_next, a_next, critic):
    """Pick the target network with the smaller |expected TD error| and shift its next-state distribution."""
    r, (p1, p2), (d1, d2) = _next_and_current(r, s, a, s_next, a_next, critic)
    source = tdr_select(d1, d2)
    return _shifted(r, np.where((source == 1)[:, None], p1, p2), source, critic, d1, d2)


def dist_dq_target_operator(r, s_next, a_next, critic):
    """Double-Q analogue: shift the target distribution with the smaller expected next value."""
    r = _vec(r)
    p1 = dist_probs(critic.z1_target, s_next, a_next)
    p2 = dist_probs(critic.z2_target, s_next, a_next)
    e1, e2 = expected_value(p1, critic.support), expected_value(p2, critic.support)
    source = np.where(e1 <= e2, 1, 2)
    nan = np.full_like(r, np.nan)
    return _shifted(r, np.where((source == 1)[:, None], p1, p2), source, critic, nan, nan)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(m):
    m = np.asarray(m, dtype=np.float64)
    safe = np.where(m > 0, m, 1.0)
    return -np.sum(m * np.log(safe), axis=-1)


def dist_critic_loss_and_grads(s, a, target_probs, critic):
    """Mean over the batch of the summed cross-entropies to the projected targets.

    Returns ``(loss, grads_z1, grads_z2, kl)`` where ``kl`` is the same quantity with the
    target entropy subtracted (the parameter-independent part of cross-entropy).
    """
    m = np.atleast_2d(np.asarray(target_probs, dtype=np.float64))
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("non-finite projected targets")
    x = np.concatenate([_rows(s), _rows(a)], axis=1)
    if m.shape != (x.shape[0], len(critic.support)):
        raise ConfigError(f"target shape {m.shape} does not match batch {x.shape[0]} x {len(critic.support)}")
    n = x.shape[0]
    loss = 0.0
    grads = []
    for net in (critic.z1, critic.z2):
        p, cache = forward(net, x, return_cache=True)
        loss += float(-np.sum(m * log_softmax(cache.preacts[-1]))) / n
        g, _ = backward(net, cache, (p - m) / n, wrt="logits")
        grads.append(g)
    kl = loss - 2.0 * float(entropy(m).mean())
    return loss, grads[0], grads[1], kl
