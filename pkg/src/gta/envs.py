"""Analytic point-mass environments with exact dynamics and reward oracles,
plus scripted behavior policies for building offline datasets of controlled
quality."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TrajectoryDataset, make_dataset


@dataclass(frozen=True)
class PointMassEnv:
    """2-d double integrator. State (px, py, vx, vy), action = force in
    [-1, 1]^2. Position integrates the previous velocity, then velocity
    integrates the (clipped) action and is clamped to speed 2.

    Dense reward: -(distance to goal) - 0.05 * ||action||^2, no terminals.
    """

    dt: float = 0.1
    max_speed: float = 2.0
    action_cost: float = 0.05
    goal: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    episode_len: int = 64
    env_id: str = "pointmass-dense-v0"

    state_dim = 4
    action_dim = 2

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(-1.0, 0.0, size=2)
        return np.array([pos[0], pos[1], 0.0, 0.0])

    def dynamics(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        """True transition function f*(s, a); actions clipped to bounds."""
        action = np.clip(action, -1.0, 1.0)
        pos = state[..., 0:2] + self.dt * state[..., 2:4]
        vel = state[..., 2:4] + self.dt * action
        speed = np.linalg.norm(vel, axis=-1, keepdims=True)
        scale = np.where(
            speed > self.max_speed,
            self.max_speed / np.maximum(speed, 1e-12),
            1.0,
        )
        return np.concatenate([pos, vel * scale], axis=-1)

    def reward(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        action = np.clip(action, -1.0, 1.0)
        dist = np.linalg.norm(state[..., 0:2] - self.goal, axis=-1)
        return -dist - self.action_cost * (action ** 2).sum(axis=-1)

    def is_done(self, state: np.ndarray) -> bool:
        return False

    def step(self, state: np.ndarray, action: np.ndarray):
        r = self.reward(state, action)
        s_next = self.dynamics(state, action)
        return s_next, float(r), self.is_done(state)


@dataclass(frozen=True)
class SparsePointMassEnv(PointMassEnv):
    """Same dynamics; reward 1 inside radius 0.1 of the goal, else 0.
    Reaching the goal region terminates the episode."""

    goal_radius: float = 0.1
    env_id: str = "pointmass-sparse-v0"

    def reward(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        dist = np.linalg.norm(state[..., 0:2] - self.goal, axis=-1)
        return (dist < self.goal_radius).astype(np.float64)

    def is_done(self, state: np.ndarray) -> bool:
        return bool(np.linalg.norm(state[0:2] - self.goal) < self.goal_radius)


ENV_REGISTRY = {
    "pointmass-dense-v0": PointMassEnv,
    "pointmass-sparse-v0": SparsePointMassEnv,
}


def make_env(env_id: str) -> PointMassEnv:
    if env_id not in ENV_REGISTRY:
        raise ValueError(f"unknown environment id {env_id!r}; known: {sorted(ENV_REGISTRY)}")
    return ENV_REGISTRY[env_id]()


# ---------------------------------------------------------------------------
# Scripted behavior policies

def _random_policy(env, rng):
    def act(state):
        return rng.uniform(-1.0, 1.0, size=2)
    return act

def _medium_policy(env, rng):
    # proportional controller, heavy action noise; underdamped on purpose
    def act(state):
        a = 1.0 * (env.goal - state[0:2]) + rng.normal(0.0, 0.5, size=2)
        return np.clip(a, -1.0, 1.0)
    return act

def _expert_policy(env, rng):
    # proportional-derivative controller, light noise
    def act(state):
        a = 4.0 * (env.goal - state[0:2]) - 4.0 * state[2:4] + rng.normal(0.0, 0.1, size=2)
        return np.clip(a, -1.0, 1.0)
    return act

_POLICIES = {"random": _random_policy, "medium": _medium_policy, "expert": _expert_policy}


def rollout_episode(env: PointMassEnv, policy, rng: np.random.Generator):
    """Run one episode; returns (observations, actions, rewards, terminals)."""
    obs, acts, rews, terms = [], [], [], []
    state = env.reset(rng)
    for _ in range(env.episode_len):
        action = np.clip(policy(state), -1.0, 1.0)
        next_state, r, done = env.step(state, action)
        obs.append(state)
        acts.append(action)
        rews.append(r)
        terms.append(done)
        state = next_state
        if done:
            break
    return np.array(obs), np.array(acts), np.array(rews), np.array(terms)


def generate_dataset(
    env: PointMassEnv,
    quality: str,
    n_episodes: int,
    seed: int | np.random.Generator = 0,
    mixed_expert_per: int = 10,
    gamma: float = 1.0,
) -> TrajectoryDataset:
    """Roll out a scripted policy into a TrajectoryDataset.

    quality: random | medium | expert | mixed. Mixed interleaves one expert
    episode per `mixed_expert_per` medium episodes (1:10 by default).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if quality not in ("random", "medium", "expert", "mixed"):
        raise ValueError(f"unknown quality {quality!r}")

    all_obs, all_act, all_rew, all_term, offsets = [], [], [], [], []
    total = 0
    for ep in range(n_episodes):
        if quality == "mixed":
            tier = "expert" if ep % (mixed_expert_per + 1) == 0 else "medium"
        else:
            tier = quality
        policy = _POLICIES[tier](env, rng)
        obs, acts, rews, terms = rollout_episode(env, policy, rng)
        offsets.append(total)
        total += obs.shape[0]
        all_obs.append(obs)
        all_act.append(acts)
        all_rew.append(rews)
        all_term.append(terms)

    return make_dataset(
        np.concatenate(all_obs),
        np.concatenate(all_act),
        np.concatenate(all_rew),
        np.concatenate(all_term),
        np.array(offsets),
        gamma_default=gamma,
        env_id=env.env_id,
    )
