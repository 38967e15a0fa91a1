"""Minimal TD3+BC offline learner and evaluation protocol, used to check
that augmented data actually helps a downstream policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .data import NormStats, TrajectoryDataset, transition_pairs


@dataclass
class ReplayBuffer:
    """Flat transition arrays; observations are stored z-scored."""

    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    stats: NormStats

    @property
    def size(self) -> int:
        return self.obs.shape[0]

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=n)
        return (self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx])


def _dataset_transitions(ds: TrajectoryDataset):
    """(s, a, r, s', done) tuples of a dataset. Rows with a stored successor
    chain to it; a terminal final row is kept with itself as placeholder
    successor (masked by done); non-terminal final rows are dropped."""
    s, a, r, s_next, done = transition_pairs(ds)
    ends = np.append(ds.episode_offsets[1:], ds.n_total) - 1
    term_tail = ends[ds.terminals[ends]]
    if term_tail.size:
        s = np.concatenate([s, ds.observations[term_tail]])
        a = np.concatenate([a, ds.actions[term_tail]])
        r = np.concatenate([r, ds.rewards[term_tail]])
        s_next = np.concatenate([s_next, ds.observations[term_tail]])
        done = np.concatenate([done, np.ones(term_tail.size, dtype=bool)])
    return s, a, r, s_next, done


def build_replay(
    sources: list[TrajectoryDataset],
    mix_ratio: tuple[float, ...] | None = None,
    stats: NormStats | None = None,
    rng: np.random.Generator | None = None,
) -> ReplayBuffer:
    """Concatenate transition sources into one buffer. mix_ratio gives the
    target proportion per source; sources are subsampled (never upsampled)
    to match it. Observations are normalized with `stats` (default: the
    first source's stats)."""
    if not sources:
        raise ValueError("need at least one source dataset")
    if stats is None:
        stats = sources[0].norm_stats
    if rng is None:
        rng = np.random.default_rng(0)
    parts = [_dataset_transitions(ds) for ds in sources]
    counts = np.array([p[0].shape[0] for p in parts], dtype=np.float64)

    if mix_ratio is not None:
        ratio = np.asarray(mix_ratio, dtype=np.float64)
        if ratio.shape[0] != len(sources):
            raise ValueError("mix_ratio length must match the number of sources")
        if (ratio < 0).any() or ratio.sum() == 0:
            raise ValueError("mix_ratio entries must be >= 0 with a positive sum")
        nonzero = ratio > 0
        scale = (counts[nonzero] / ratio[nonzero]).min()
        keep = np.where(nonzero, np.round(ratio * scale).astype(int), 0)
        keep = np.minimum(keep, counts.astype(int))
    else:
        keep = counts.astype(int)

    sel = []
    for part, n_keep, n_have in zip(parts, keep, counts.astype(int)):
        if n_keep == 0:
            continue
        idx = rng.choice(n_have, size=n_keep, replace=False) if n_keep < n_have else np.arange(n_have)
        sel.append(tuple(arr[idx] for arr in part))
    if not sel:
        raise ValueError("replay buffer would be empty")
    s, a, r, s_next, done = (np.concatenate(cols) for cols in zip(*sel))
    obs_n = ((s - stats.obs_mean) / stats.obs_std).astype(np.float32)
    next_n = ((s_next - stats.obs_mean) / stats.obs_std).astype(np.float32)
    return ReplayBuffer(
        obs=obs_n,
        act=a.astype(np.float32),
        rew=r.astype(np.float32),
        next_obs=next_n,
        done=done.astype(np.float32),
        stats=stats,
    )


@dataclass(frozen=True)
class TD3BCConfig:
    actor_width: int = 256
    critic_width: int = 256
    discount: float = 0.99
    tau: float = 0.005              # target network update rate
    policy_delay: int = 2
    bc_weight: float = 2.5          # alpha in lambda = alpha / mean|Q|
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    batch_size: int = 1024
    gradient_steps: int = 20_000
    lr: float = 3e-4
    max_action: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")


def _mlp(sizes: list[int], out_act: nn.Module | None = None) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    if out_act is not None:
        layers.append(out_act)
    return nn.Sequential(*layers)


def _init_net(net: nn.Module, gen: torch.Generator) -> None:
    for p in net.parameters():
        if p.ndim == 2:
            bound = 1.0 / math.sqrt(p.shape[1])
            p.data = (torch.rand(p.shape, generator=gen) * 2 - 1) * bound
        else:
            p.data.zero_()


@dataclass
class Policy:
    """Deterministic policy plus the observation normalizer it was trained
    under, so it can act directly on raw environment states."""

    actor: nn.Sequential
    stats: NormStats
    max_action: float = 1.0
    meta: dict = field(default_factory=dict)

    def act(self, obs: np.ndarray) -> np.ndarray:
        x = (np.asarray(obs, dtype=np.float64) - self.stats.obs_mean) / self.stats.obs_std
        with torch.no_grad():
            a = self.actor(torch.as_tensor(x[None], dtype=torch.float32))
        return a.numpy()[0] * self.max_action


def td3bc_train(replay: ReplayBuffer, cfg: TD3BCConfig, seed: int | None = None) -> Policy:
    """Twin critics, delayed deterministic actor with target smoothing, and a
    behavior-cloning term weighted by bc_weight / mean|Q|."""
    if replay.size == 0:
        raise ValueError("replay buffer is empty")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(int(seed))

    d_s = replay.obs.shape[1]
    d_a = replay.act.shape[1]
    aw, cw = cfg.actor_width, cfg.critic_width
    actor = _mlp([d_s, aw, aw, d_a], out_act=nn.Tanh())
    critic1 = _mlp([d_s + d_a, cw, cw, 1])
    critic2 = _mlp([d_s + d_a, cw, cw, 1])
    for net in (actor, critic1, critic2):
        _init_net(net, gen)
    actor_t = _clone(actor)
    critic1_t = _clone(critic1)
    critic2_t = _clone(critic2)

    actor_opt = torch.optim.Adam(actor.parameters(), lr=cfg.lr)
    critic_opt = torch.optim.Adam(
        list(critic1.parameters()) + list(critic2.parameters()), lr=cfg.lr
    )

    for step in range(cfg.gradient_steps):
        s, a, r, s2, done = replay.sample(cfg.batch_size, rng)
        s = torch.as_tensor(s)
        a = torch.as_tensor(a)
        r = torch.as_tensor(r)[:, None]
        s2 = torch.as_tensor(s2)
        done = torch.as_tensor(done)[:, None]

        with torch.no_grad():
            noise = (
                torch.as_tensor(
                    rng.normal(0.0, cfg.policy_noise, size=(cfg.batch_size, d_a)),
                    dtype=torch.float32,
                )
            ).clamp(-cfg.noise_clip, cfg.noise_clip)
            a2 = (actor_t(s2) * cfg.max_action + noise).clamp(-cfg.max_action, cfg.max_action)
            q_next = torch.min(critic1_t(torch.cat([s2, a2], 1)),
                               critic2_t(torch.cat([s2, a2], 1)))
            target = r + cfg.discount * (1.0 - done) * q_next

        sa = torch.cat([s, a], 1)
        critic_loss = ((critic1(sa) - target) ** 2).mean() + ((critic2(sa) - target) ** 2).mean()
        if not torch.isfinite(critic_loss):
            raise RuntimeError(f"critic loss diverged at step {step}")
        critic_opt.zero_grad()
        critic_loss.backward()
        critic_opt.step()

        if step % cfg.policy_delay == 0:
            pi = actor(s) * cfg.max_action
            q = critic1(torch.cat([s, pi], 1))
            lam = cfg.bc_weight / q.abs().mean().detach().clamp_min(1e-8)
            actor_loss = -lam * q.mean() + ((pi - a) ** 2).mean()
            actor_opt.zero_grad()
            actor_loss.backward()
            actor_opt.step()
            _soft_update(actor_t, actor, cfg.tau)
            _soft_update(critic1_t, critic1, cfg.tau)
            _soft_update(critic2_t, critic2, cfg.tau)

    actor.eval()
    return Policy(
        actor=actor,
        stats=replay.stats,
        max_action=cfg.max_action,
        meta={"gradient_steps": cfg.gradient_steps, "seed": seed, "replay_size": replay.size},
    )


def _clone(net: nn.Sequential) -> nn.Sequential:
    import copy

    target = copy.deepcopy(net)
    for p in target.parameters():
        p.requires_grad_(False)
    return target


def _soft_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    with torch.no_grad():
        for pt, ps in zip(target.parameters(), source.parameters()):
            pt.mul_(1.0 - tau).add_(tau * ps)


def evaluate_policy(env, policy: Policy, n_episodes: int, rng: np.random.Generator):
    """Deterministic rollouts; returns (mean, std) of undiscounted episode
    return."""
    returns = np.empty(n_episodes)
    for ep in range(n_episodes):
        state = env.reset(rng)
        total = 0.0
        for _ in range(env.episode_len):
            action = np.clip(policy.act(state), -1.0, 1.0)
            state, r, done = env.step(state, action)
            total += r
            if done:
                break
        returns[ep] = total
    return float(returns.mean()), float(returns.std())


def normalized_score(raw: float, random_ref: float, expert_ref: float) -> float:
    """100 * (raw - random_ref) / (expert_ref - random_ref)."""
    if expert_ref <= random_ref:
        raise ValueError("expert_ref must exceed random_ref")
    return 100.0 * (raw - random_ref) / (expert_ref - random_ref)


# ---------------------------------------------------------------------------
# Policy checkpoints (same container format as the denoiser)

def save_policy(policy: Policy, path) -> None:
    linears = [m for m in policy.actor if isinstance(m, nn.Linear)]
    header = {
        "stats": policy.stats.to_json(),
        "max_action": policy.max_action,
        "meta": policy.meta,
        "layer_sizes": [linears[0].in_features] + [m.out_features for m in linears],
    }
    arrays = [(name, p.detach().numpy()) for name, p in policy.actor.named_parameters()]
    ckpt.write_checkpoint(path, "policy", header, arrays)


def load_policy(path) -> Policy:
    header, arrays = ckpt.read_checkpoint(path, "policy")
    sizes = header["layer_sizes"]
    actor = _mlp(sizes, out_act=nn.Tanh())
    with torch.no_grad():
        for name, p in actor.named_parameters():
            p.copy_(torch.as_tensor(arrays[name]))
    actor.eval()
    return Policy(
        actor=actor,
        stats=NormStats.from_json(header["stats"]),
        max_action=float(header["max_action"]),
        meta=header.get("meta", {}),
    )
