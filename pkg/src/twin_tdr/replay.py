"""Replay storage with long-N-step surrogate (LNSS) rewards applied at insertion.

Raw steps ``(s, a, r, s_next, done)`` go through an :class:`LnssWindow` of size N.
Once N raw steps are queued, the oldest is emitted with the discount-weighted
average of the N queued rewards in place of its own reward. At episode end the
remaining queued steps are emitted with the same average taken over whatever
suffix of the episode is left.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import BufferNotReady, ConfigError


def lnss_reward(rewards, gamma):
    """Discount-weighted average ``sum_t gamma^t r_t / sum_t gamma^t``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ConfigError("LNSS reward needs at least one reward")
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    weights = gamma ** np.arange(r.size)
    return float(weights @ r / weights.sum())


def lnss_tail_reward(rewards, gamma):
    """Episode-tail form ``(gamma - 1) / (gamma^M - 1) * sum_t gamma^t r_t`` over M remaining rewards."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ConfigError("tail reward needs at least one remaining reward")
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    discounted = float(gamma ** np.arange(r.size) @ r)
    return (gamma - 1.0) / (gamma ** r.size - 1.0) * discounted


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r_prime: float
    s_next: np.ndarray
    done: bool


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.r)


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is overwritten on overflow."""

    def __init__(self, capacity, obs_dim, act_dim):
        if capacity < 1:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, obs_dim))
        self.a = np.zeros((self.capacity, act_dim))
        self.r = np.zeros(self.capacity)
        self.s_next = np.zeros((self.capacity, obs_dim))
        self.done = np.zeros(self.capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, t):
        if not np.isfinite(t.r_prime):
            raise ConfigError(f"non-finite surrogate reward {t.r_prime}")
        i = self.cursor
        self.s[i] = t.s
        self.a[i] = t.a
        self.r[i] = t.r_prime
        self.s_next[i] = t.s_next
        self.done[i] = t.done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, i):
        if not 0 <= i < self.size:
            raise IndexError(i)
        return Transition(self.s[i].copy(), self.a[i].copy(), float(self.r[i]), self.s_next[i].copy(), bool(self.done[i]))

    def sample(self, batch_size, rng):
        """Uniform sampling with replacement; a batch may repeat a transition.

        Only an empty buffer is "not ready": with replacement, any non-empty buffer can
        fill a batch, and the trainer gates sampling on its own warm-up threshold.
        """
        if self.size < 1:
            raise BufferNotReady("cannot sample from an empty buffer")
        if batch_size < 1:
            raise ConfigError("batch size must be positive")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    def dump_csv(self, path):
        """One row per stored transition in storage order: s*, a*, r_prime, s_next*, done."""
        od, ad = self.s.shape[1], self.a.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                [f"s{i}" for i in range(od)]
                + [f"a{i}" for i in range(ad)]
                + ["r_prime"]
                + [f"s_next{i}" for i in range(od)]
                + ["done"]
            )
            for i in range(self.size):
                w.writerow(
                    [*map(repr, self.s[i].tolist()), *map(repr, self.a[i].tolist()), repr(float(self.r[i])),
                     *map(repr, self.s_next[i].tolist()), int(self.done[i])]
                )
        return path


class LnssWindow:
    """Temporary FIFO of at most N raw steps for the current episode."""

    def __init__(self, n, gamma):
        if n < 1:
            raise ConfigError("LNSS window size must be >= 1")
        if not 0.0 < gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
        self.n = int(n)
        self.gamma = float(gamma)
        self.pending = deque()

    def __len__(self):
        return len(self.pending)

    def reset(self):
        self.pending.clear()

    def push(self, raw, buffer, episode_ended=False):
        """Queue one raw ``(s, a, r, s_next, done)`` step; returns the number of transitions emitted."""
        self.pending.append(raw)
        emitted = 0
        if len(self.pending) == self.n:
            rewards = [step[2] for step in self.pending]
            s, a, _, s_next, done = self.pending.popleft()
            buffer.add(Transition(s, a, lnss_reward(rewards, self.gamma), s_next, done))
            emitted += 1
        if episode_ended:
            while self.pending:
                rewards = [step[2] for step in self.pending]
                s, a, _, s_next, done = self.pending.popleft()
                buffer.add(Transition(s, a, lnss_tail_reward(rewards, self.gamma), s_next, done))
                emitted += 1
        return emitted


def push_raw(window, buffer, raw, episode_ended=False):
    return window.push(raw, buffer, episode_ended)
