"""Desk-scale point-mass environments and tiered behavior-policy datasets.

The canonical task is a 2-D point mass in an axis-aligned box steering
toward a goal with dense negative-distance reward. A 4-D variant appends
velocity to the observation to exercise sparse cell occupancy, and a
sparse-reward flag turns the task maze-like. Dataset tiers mirror the
usual offline-RL quality levels: random / medium / medium_replay / expert.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import rng as rng_mod
from .dataset import StaticDataset

TIERS = ("random", "medium", "medium_replay", "expert")

# Clipped proportional controller gain, in units of 1/position. Chosen so
# that gain * action_scale < 1 on the default box: monotone approach, no
# overshoot.
CONTROLLER_GAIN = 4.0
EXPERT_NOISE = 0.05
MEDIUM_NOISE = 0.5
VELOCITY_DAMPING = 0.9


@dataclass(frozen=True)
class PointMassEnv:
    """Axis-aligned box point mass. Value-like: cheap to copy, never mutated.

    Position updates by dt * action_scale * action (plus optional process
    noise) and clips to the box. Reward is -||pos - goal||, or the sparse
    0/1 goal indicator when sparse_reward is set. An episode is terminal
    when the goal is within goal_tolerance; the step budget (max_steps)
    is enforced by rollout loops, not by env_step, and truncation is not
    a terminal flag.
    """

    bounds_min: np.ndarray
    bounds_max: np.ndarray
    goal: np.ndarray
    dt: float = 1.0
    max_steps: int = 200
    action_scale: float = 0.05
    noise_std: float = 0.0
    sparse_reward: bool = False
    include_velocity: bool = False
    goal_tolerance: float = 0.0  # 0 -> 0.05 * box diagonal

    def __post_init__(self):
        object.__setattr__(self, "bounds_min", np.asarray(self.bounds_min, dtype=np.float64))
        object.__setattr__(self, "bounds_max", np.asarray(self.bounds_max, dtype=np.float64))
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=np.float64))
        if not np.all(self.bounds_min < self.bounds_max):
            raise ValueError("bounds_min must be strictly below bounds_max")
        if not (np.all(self.goal > self.bounds_min) and np.all(self.goal < self.bounds_max)):
            raise ValueError("goal must lie strictly inside bounds")
        if self.goal_tolerance <= 0.0:
            diagonal = float(np.linalg.norm(self.bounds_max - self.bounds_min))
            object.__setattr__(self, "goal_tolerance", 0.05 * diagonal)

    @property
    def position_dim(self) -> int:
        return self.bounds_min.shape[0]

    @property
    def state_dim(self) -> int:
        return self.position_dim * (2 if self.include_velocity else 1)

    @property
    def action_dim(self) -> int:
        return self.position_dim


def default_env(include_velocity: bool = False, sparse_reward: bool = False) -> PointMassEnv:
    """Unit-box 2-D env (4-D observation when include_velocity)."""
    return PointMassEnv(
        bounds_min=np.zeros(2),
        bounds_max=np.ones(2),
        goal=np.array([0.8, 0.8]),
        include_velocity=include_velocity,
        sparse_reward=sparse_reward,
    )


@dataclass(frozen=True)
class TierSpec:
    """Which behavior policy generates the dataset, and how much of it."""

    tier: str
    n_transitions: int
    seed: int

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}, expected one of {TIERS}")
        if self.n_transitions < 1:
            raise ValueError("n_transitions must be >= 1")


def _split(env: PointMassEnv, state: np.ndarray):
    pos = state[:env.position_dim]
    vel = state[env.position_dim:] if env.include_velocity else None
    return pos, vel


def env_reset(env: PointMassEnv, seed: int) -> np.ndarray:
    """Start state: position uniform in the box, velocity (if any) zero."""
    return _reset(env, rng_mod.root(seed))


def _reset(env: PointMassEnv, rng: np.random.Generator) -> np.ndarray:
    pos = rng.uniform(env.bounds_min, env.bounds_max)
    if env.include_velocity:
        return np.concatenate([pos, np.zeros(env.position_dim)])
    return pos


def env_step(env: PointMassEnv, state, action, rng: np.random.Generator | None = None):
    """Advance one step; returns (next_state, reward, done).

    done marks goal arrival only. Actions must lie in [-1, 1] within 1e-6.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (env.action_dim,):
        raise ValueError(f"action shape {action.shape} != ({env.action_dim},)")
    if np.abs(action).max() > 1.0 + 1e-6:
        raise ValueError(f"action outside [-1, 1]: {action}")
    noise = 0.0
    if env.noise_std > 0.0:
        if rng is None:
            raise ValueError("noise_std > 0 requires an rng")
        noise = rng.normal(0.0, env.noise_std, size=env.position_dim)
    pos, vel = _split(env, state)
    if env.include_velocity:
        vel = VELOCITY_DAMPING * vel + env.action_scale * action
        next_pos = np.clip(pos + env.dt * vel + noise, env.bounds_min, env.bounds_max)
        next_state = np.concatenate([next_pos, vel])
    else:
        next_pos = np.clip(pos + env.dt * env.action_scale * action + noise,
                           env.bounds_min, env.bounds_max)
        next_state = next_pos
    dist = float(np.linalg.norm(next_pos - env.goal))
    done = dist < env.goal_tolerance
    if env.sparse_reward:
        reward = 1.0 if done else 0.0
    else:
        reward = -dist
    return next_state, reward, done


def proportional_action(env: PointMassEnv, state: np.ndarray) -> np.ndarray:
    """Clipped proportional controller toward the goal (the expert core)."""
    pos, vel = _split(env, state)
    raw = CONTROLLER_GAIN * (env.goal - pos)
    if vel is not None:
        raw = raw - (VELOCITY_DAMPING / env.action_scale) * 0.5 * vel
    return np.clip(raw, -1.0, 1.0)


def behavior_action(tier: str, env: PointMassEnv, state, rng: np.random.Generator,
                    noise_override: float | None = None) -> np.ndarray:
    """One behavior-policy action for the given tier.

    random: uniform in [-1, 1]^m. expert/medium: proportional controller
    plus Gaussian noise (sigma 0.05 / 0.5). medium_replay callers pick
    random or medium per episode (see generate_dataset).
    """
    if tier == "random":
        return rng.uniform(-1.0, 1.0, size=env.action_dim)
    if tier in ("expert", "medium"):
        sigma = EXPERT_NOISE if tier == "expert" else MEDIUM_NOISE
        if noise_override is not None:
            sigma = noise_override
        action = proportional_action(env, np.asarray(state, dtype=np.float64))
        if sigma > 0.0:
            action = action + rng.normal(0.0, sigma, size=env.action_dim)
        return np.clip(action, -1.0, 1.0)
    if tier == "medium_replay":
        raise ValueError("medium_replay is a per-episode mixture; sample the episode tier first")
    raise ValueError(f"unknown tier {tier!r}")


def _episode_tier(tier: str, rng: np.random.Generator) -> str:
    if tier == "medium_replay":
        return "random" if rng.random() < 0.5 else "medium"
    return tier


def rollout_episode(env: PointMassEnv, policy, rng: np.random.Generator,
                    start=None, max_steps: int | None = None):
    """Roll one episode; returns (transitions, total_return).

    policy(state) -> action. Episode ends at the goal or after max_steps
    (default env.max_steps) transitions.
    """
    cap = env.max_steps if max_steps is None else max_steps
    state = _reset(env, rng) if start is None else np.asarray(start, dtype=np.float64)
    transitions = []
    total = 0.0
    for _ in range(cap):
        action = np.clip(np.asarray(policy(state), dtype=np.float64), -1.0, 1.0)
        next_state, reward, done = env_step(env, state, action, rng)
        transitions.append((state, action, reward, next_state, done))
        total += reward
        state = next_state
        if done:
            break
    return transitions, total


def generate_dataset(env: PointMassEnv, spec: TierSpec) -> StaticDataset:
    """Roll the tier's behavior policy until n_transitions are collected.

    Fully deterministic given (env, spec): a single PCG64 stream seeded by
    spec.seed drives resets, behavior noise, and process noise in order.
    """
    rng = rng_mod.root(spec.seed)
    n = spec.n_transitions
    states, actions, rewards, next_states, dones = [], [], [], [], []
    while len(states) < n:
        episode_tier = _episode_tier(spec.tier, rng)
        state = _reset(env, rng)
        for _ in range(env.max_steps):
            action = behavior_action(episode_tier, env, state, rng)
            next_state, reward, done = env_step(env, state, action, rng)
            states.append(state)
            actions.append(action)
            rewards.append(reward)
            next_states.append(next_state)
            dones.append(done)
            state = next_state
            if done or len(states) >= n:
                break
    return StaticDataset(
        states=np.asarray(states[:n]),
        actions=np.asarray(actions[:n]),
        rewards=np.asarray(rewards[:n]),
        next_states=np.asarray(next_states[:n]),
        dones=np.asarray(dones[:n]),
    )


@dataclass
class ReferenceReturns:
    """Random/expert mean episode returns anchoring the normalized score."""

    random_return: float
    expert_return: float
    n_episodes: int
    seed: int


def reference_returns(env: PointMassEnv, seed: int, n_episodes: int = 100) -> ReferenceReturns:
    """Average episode returns of the random and expert behavior policies."""
    totals = {}
    for tier in ("random", "expert"):
        rng = rng_mod.stream(seed, rng_mod.EVALUATION)
        returns = []
        for _ in range(n_episodes):
            policy = lambda s: behavior_action(tier, env, s, rng)
            _, total = rollout_episode(env, policy, rng)
            returns.append(total)
        totals[tier] = float(np.mean(returns))
    return ReferenceReturns(
        random_return=totals["random"],
        expert_return=totals["expert"],
        n_episodes=n_episodes,
        seed=seed,
    )


def normalized_score(mean_return: float, refs: ReferenceReturns) -> float:
    """100 * (return - random_ref) / (expert_ref - random_ref)."""
    span = refs.expert_return - refs.random_return
    if span == 0.0:
        raise ValueError("expert and random reference returns coincide")
    return 100.0 * (mean_return - refs.random_return) / span
