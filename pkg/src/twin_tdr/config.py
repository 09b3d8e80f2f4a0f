"""Run configuration, presets and JSON round-tripping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .actor import PENALTY_MODES, check_rho
from .envs import EnvConfig, NoiseSpec
from .errors import ConfigError

ALGORITHMS = ("td3", "td3_tdr", "d4pg", "d4pg_tdr")
TARGET_RULES = ("dq", "tdr")


@dataclass
class TrainConfig:
    algorithm: str = "td3_tdr"
    env: str = "pendulum"
    sparse: bool = True
    gate_threshold: float = 0.95
    state_noise: float = 0.1
    action_noise: float = 0.1
    reward_noise: float = 0.1
    horizon: int = 200
    seed: int = 0
    max_timesteps: int = 100_000
    start_timesteps: int = 2_000
    eval_frequency: int = 2_000
    eval_episodes: int = 5
    psi_rollouts: int = 10
    batch_size: int = 256
    buffer_size: int = 100_000
    hidden: list = field(default_factory=lambda: [64, 64])
    learning_rate: float = 1e-3
    init_scale: float = 1.0
    grad_clip: float = 0.0
    gamma: float = 0.99
    tau: float = 0.005
    lnss_n: int = 20
    rho: float = 0.7
    penalty_mode: str = "through_bootstrap"
    critic_target_rule: str = "tdr"
    policy_update_frequency: int = 2
    exploration_noise: float = 0.1
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    v_min: float = 0.0
    v_max: float = 50.0
    n_atoms: int = 51
    log_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def distributional(self):
        return self.algorithm.startswith("d4pg")

    @property
    def baseline(self):
        """Vanilla algorithms ignore rho, the target rule and LNSS."""
        return self.algorithm in ("td3", "d4pg")

    @property
    def eval_seed(self):
        return self.seed + 100

    def env_config(self):
        noise = NoiseSpec(self.state_noise, self.action_noise, self.reward_noise, seed=self.seed)
        return EnvConfig(self.env, self.sparse, self.gate_threshold, noise, self.horizon)

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.critic_target_rule not in TARGET_RULES:
            raise ConfigError(f"critic_target_rule must be one of {TARGET_RULES}")
        if self.penalty_mode not in PENALTY_MODES:
            raise ConfigError(f"penalty_mode must be one of {PENALTY_MODES}")
        check_rho(self.rho)
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        for name in ("max_timesteps", "start_timesteps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("eval_frequency", "eval_episodes", "psi_rollouts", "batch_size", "buffer_size",
                     "lnss_n", "policy_update_frequency", "horizon", "n_atoms"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise ConfigError("hidden layer sizes must be positive")
        if self.v_max <= self.v_min:
            raise ConfigError("v_max must exceed v_min")
        if self.init_scale <= 0:
            raise ConfigError("init_scale must be positive")
        if min(self.exploration_noise, self.policy_noise, self.noise_clip, self.learning_rate, self.grad_clip) < 0:
            raise ConfigError("noise scales and learning rate must be non-negative")
        self.env_config().noise  # NoiseSpec validates the fractions

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _field_types():
    return {f.name: f.type for f in fields(TrainConfig)}


def from_dict(data, base=None):
    """Build a config from a mapping; unknown keys are rejected."""
    known = _field_types()
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return replace(base or TrainConfig(), **data)


def load_config(path, base=None):
    with open(path) as fh:
        return from_dict(json.load(fh), base)


def parse_override(text):
    """``key=value`` with the value parsed as JSON when possible (``rho=0.5``, ``hidden=[32,32]``)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in _field_types():
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(cfg, overrides):
    return from_dict(dict(parse_override(o) for o in overrides), cfg)


# Scaled-down settings that finish a seed in minutes on one CPU core.
DESK = {}

# Published settings (horizon, schedule, network width, LNSS window, buffer).
FULL = {
    "horizon": 1000,
    "max_timesteps": 1_000_000,
    "start_timesteps": 8_000,
    "eval_frequency": 10_000,
    "buffer_size": 1_000_000,
    "hidden": [256, 256],
    "lnss_n": 100,
    "v_max": 100.0,
}

# The distributional table lists no target smoothing and no delayed policy updates.
DIST_OVERRIDES = {"policy_noise": 0.0, "policy_update_frequency": 1}

PRESETS = {"desk": DESK, "full": FULL}


def preset(name="desk", algorithm="td3_tdr", **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    data = {"algorithm": algorithm, **PRESETS[name]}
    if algorithm.startswith("d4pg"):
        data.update(DIST_OVERRIDES)
    data.update(overrides)
    return from_dict(data)
