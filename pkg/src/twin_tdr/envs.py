"""Desk-scale continuous-control tasks: pendulum and cartpole swing-up.

Angles are measured from upright (theta = 0 balanced, theta = pi hanging).
Both tasks integrate with semi-implicit Euler: at every control step of length
``dt`` the dynamics are advanced ``substeps`` times with step ``dt / substeps``
(velocity first, then position). Actions live in [-1, 1] and are scaled by the
torque/force bound. Episodes have a fixed horizon and never terminate early.

Reset law: the pendulum starts at theta = pi + U(-j, j), theta_dot = U(-j, j)
with j = ``reset_jitter`` (0.05); the cartpole additionally draws x = U(-j, j).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class EnvState:
    observation: np.ndarray
    step_index: int = 0


@dataclass
class StepResult:
    next_observation: np.ndarray
    reward: float
    done: bool


@dataclass
class NoiseSpec:
    state_frac: float = 0.10
    action_frac: float = 0.10
    reward_frac: float = 0.10
    seed: int = 0

    def __post_init__(self):
        for name in ("state_frac", "action_frac", "reward_frac"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")

    @property
    def is_identity(self):
        return self.state_frac == 0.0 and self.action_frac == 0.0 and self.reward_frac == 0.0


@dataclass
class PendulumParams:
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    damping: float = 0.05
    max_torque: float = 5.0
    max_speed: float = 8.0
    dt: float = 0.02
    substeps: int = 4
    horizon: int = 200
    reset_jitter: float = 0.05


@dataclass
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    gravity: float = 9.81
    max_force: float = 10.0
    track_limit: float = 2.4
    max_cart_speed: float = 10.0
    max_pole_speed: float = 20.0
    dt: float = 0.02
    substeps: int = 4
    horizon: int = 200
    reset_jitter: float = 0.05


def _clip_action(action):
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"non-finite action {a}")
    return np.clip(a, -1.0, 1.0)


class Pendulum:
    """Torque-limited pendulum; swing-up needs several energy-pumping swings.

    The default torque bound (5) is below ``m g l`` so the pole cannot be lifted
    directly, yet a pumping controller reaches the top in roughly 120 of the 200 steps.
    """

    name = "pendulum"
    obs_dim = 3
    act_dim = 1

    def __init__(self, params=None):
        self.params = params or PendulumParams()
        self.horizon = self.params.horizon
        self.theta = math.pi
        self.theta_dot = 0.0
        self.step_index = 0
        self.last_action = 0.0

    @property
    def obs_scale(self):
        return np.array([1.0, 1.0, self.params.max_speed])

    def observation(self):
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def set_state(self, theta, theta_dot):
        self.theta = float(theta)
        self.theta_dot = float(theta_dot)

    def reset(self, seed=None):
        rng = np.random.default_rng(seed)
        j = self.params.reset_jitter
        self.theta = math.pi + rng.uniform(-j, j)
        self.theta_dot = rng.uniform(-j, j)
        self.step_index = 0
        self.last_action = 0.0
        return EnvState(self.observation(), 0)

    def energy(self):
        """Mechanical energy with the potential zero at the hanging position."""
        p = self.params
        inertia = p.mass * p.length**2
        return 0.5 * inertia * self.theta_dot**2 + p.mass * p.gravity * p.length * (1.0 + math.cos(self.theta))

    def _integrate(self, u):
        p = self.params
        inertia = p.mass * p.length**2
        h = p.dt / p.substeps
        for _ in range(p.substeps):
            acc = (
                p.mass * p.gravity * p.length * math.sin(self.theta)
                - p.damping * self.theta_dot
                + u * p.max_torque
            ) / inertia
            self.theta_dot = min(max(self.theta_dot + h * acc, -p.max_speed), p.max_speed)
            self.theta += h * self.theta_dot
        self.theta = (self.theta + math.pi) % (2 * math.pi) - math.pi

    def dense_reward(self, u):
        p = self.params
        upright = 0.5 * (1.0 + math.cos(self.theta))
        slow = 1.0 - 0.1 * (self.theta_dot / p.max_speed) ** 2
        gentle = 1.0 - 0.1 * u * u
        return upright * slow * gentle

    def gate(self, threshold):
        return math.cos(self.theta) > threshold

    def step(self, action):
        u = float(_clip_action(action)[0])
        self._integrate(u)
        self.step_index += 1
        self.last_action = u
        return StepResult(self.observation(), self.dense_reward(u), self.step_index >= self.horizon)


class Cartpole:
    """Cart on a bounded track with a free pole; walls stop the cart without ending the episode."""

    name = "cartpole"
    obs_dim = 5
    act_dim = 1

    def __init__(self, params=None):
        self.params = params or CartpoleParams()
        self.horizon = self.params.horizon
        self.x = 0.0
        self.x_dot = 0.0
        self.theta = math.pi
        self.theta_dot = 0.0
        self.step_index = 0

    @property
    def obs_scale(self):
        p = self.params
        return np.array([p.track_limit, p.max_cart_speed, 1.0, 1.0, p.max_pole_speed])

    def observation(self):
        return np.array([self.x, self.x_dot, math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def reset(self, seed=None):
        rng = np.random.default_rng(seed)
        j = self.params.reset_jitter
        self.x = rng.uniform(-j, j)
        self.x_dot = 0.0
        self.theta = math.pi + rng.uniform(-j, j)
        self.theta_dot = rng.uniform(-j, j)
        self.step_index = 0
        return EnvState(self.observation(), 0)

    def _integrate(self, u):
        p = self.params
        total = p.cart_mass + p.pole_mass
        pml = p.pole_mass * p.pole_half_length
        h = p.dt / p.substeps
        force = u * p.max_force
        for _ in range(p.substeps):
            s, c = math.sin(self.theta), math.cos(self.theta)
            tmp = (force + pml * self.theta_dot**2 * s) / total
            theta_acc = (p.gravity * s - c * tmp) / (
                p.pole_half_length * (4.0 / 3.0 - p.pole_mass * c * c / total)
            )
            x_acc = tmp - pml * theta_acc * c / total
            self.x_dot = min(max(self.x_dot + h * x_acc, -p.max_cart_speed), p.max_cart_speed)
            self.theta_dot = min(max(self.theta_dot + h * theta_acc, -p.max_pole_speed), p.max_pole_speed)
            self.x += h * self.x_dot
            self.theta += h * self.theta_dot
            if abs(self.x) > p.track_limit:
                self.x = math.copysign(p.track_limit, self.x)
                self.x_dot = 0.0
        self.theta = (self.theta + math.pi) % (2 * math.pi) - math.pi

    def dense_reward(self, u):
        p = self.params
        upright = 0.5 * (1.0 + math.cos(self.theta))
        centered = 1.0 - 0.5 * (self.x / p.track_limit) ** 2
        slow = 1.0 - 0.1 * (self.theta_dot / p.max_pole_speed) ** 2
        gentle = 1.0 - 0.1 * u * u
        return upright * centered * slow * gentle

    def gate(self, threshold):
        return math.cos(self.theta) > threshold and abs(self.x) < 0.25 * self.params.track_limit

    def step(self, action):
        u = float(_clip_action(action)[0])
        self._integrate(u)
        self.step_index += 1
        return StepResult(self.observation(), self.dense_reward(u), self.step_index >= self.horizon)


class SparseReward:
    """Replaces the dense reward by 1 when the task's gate statistic passes ``threshold``, else 0."""

    def __init__(self, env, threshold=0.95):
        if not -1.0 < threshold < 1.0:
            raise ConfigError(f"gate threshold {threshold} outside the reachable range of cos(theta)")
        self.env = env
        self.threshold = threshold

    def __getattr__(self, name):
        return getattr(self.env, name)

    def reset(self, seed=None):
        return self.env.reset(seed)

    def step(self, action):
        res = self.env.step(action)
        return StepResult(res.next_observation, 1.0 if self.env.gate(self.threshold) else 0.0, res.done)


def sparsify(env, threshold=0.95):
    return SparseReward(env, threshold)


def perturb_observation(obs, scale, frac, rng):
    if frac == 0.0:
        return np.array(obs, dtype=np.float64)
    return obs + rng.uniform(-frac, frac, size=np.shape(obs)) * scale


def perturb_action(action, frac, rng):
    a = np.asarray(action, dtype=np.float64)
    if frac == 0.0:
        return a.copy()
    # the action range is [-1, 1]; scale 1 per component
    return np.clip(a + rng.uniform(-frac, frac, size=a.shape), -1.0, 1.0)


def perturb_reward(reward, frac, rng):
    if frac == 0.0:
        return float(reward)
    return max(0.0, reward + rng.uniform(-frac, frac) * abs(reward))


def apply_noise(result, action, spec, rng, obs_scale):
    """Uniform perturbation of (observation, action, reward).

    Each component ``c`` becomes ``c + U(-f, f) * scale(c)``: observations use the
    task's per-component bound (``obs_scale``), actions use 1 and the reward uses
    ``|r|`` (multiplicative noise, so zero rewards stay zero), clamped at 0.
    """
    return (
        perturb_observation(result.next_observation, obs_scale, spec.state_frac, rng),
        perturb_action(action, spec.action_frac, rng),
        perturb_reward(result.reward, spec.reward_frac, rng),
    )


class NoisyEnv:
    """Injects noise on the executed action, the returned observation and the reward."""

    def __init__(self, env, spec):
        self.env = env
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)

    def __getattr__(self, name):
        return getattr(self.env, name)

    def reset(self, seed=None):
        self.rng = np.random.default_rng([self.spec.seed, 0 if seed is None else int(seed)])
        state = self.env.reset(seed)
        obs = perturb_observation(state.observation, self.env.obs_scale, self.spec.state_frac, self.rng)
        return EnvState(obs, state.step_index)

    def step(self, action):
        executed = perturb_action(_clip_action(action), self.spec.action_frac, self.rng)
        res = self.env.step(executed)
        obs = perturb_observation(res.next_observation, self.env.obs_scale, self.spec.state_frac, self.rng)
        reward = perturb_reward(res.reward, self.spec.reward_frac, self.rng)
        return StepResult(obs, reward, res.done)


@dataclass
class EnvConfig:
    name: str = "pendulum"
    sparse: bool = False
    gate_threshold: float = 0.95
    noise: NoiseSpec | None = None
    horizon: int = 200
    physics: dict = field(default_factory=dict)


def make_env(cfg):
    if cfg.name == "pendulum":
        env = Pendulum(PendulumParams(horizon=cfg.horizon, **cfg.physics))
    elif cfg.name == "cartpole":
        env = Cartpole(CartpoleParams(horizon=cfg.horizon, **cfg.physics))
    else:
        raise ConfigError(f"unknown environment {cfg.name!r}")
    if cfg.sparse:
        env = sparsify(env, cfg.gate_threshold)
    if cfg.noise is not None and not cfg.noise.is_identity:
        env = NoisyEnv(env, cfg.noise)
    return env


def rollout_csv(path, states, actions, rewards):
    """Trajectory dump: ``step, s_0.., a_0.., reward`` (one row per step)."""
    import csv

    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["step"]
            + [f"s{i}" for i in range(states.shape[1])]
            + [f"a{i}" for i in range(actions.shape[1])]
            + ["reward"]
        )
        for k, (s, a, r) in enumerate(zip(states, actions, rewards)):
            w.writerow([k, *map(repr, map(float, s)), *map(repr, map(float, a)), repr(float(r))])
    return path
