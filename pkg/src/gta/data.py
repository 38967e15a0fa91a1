"""Offline trajectory store: container I/O, windowing, returns, normalization,
and return-weighted window sampling.

A dataset is a flat array of transitions segmented into episodes. Row i holds
(observation, action, reward, terminal) of transition i; the next state of a
transition is the observation of the following row in the same episode, so the
last row of an episode has no stored successor.

On disk a dataset is a directory ("container"): manifest.json plus raw
little-endian binary payloads (float32 for observations/actions/rewards,
uint8 terminals, uint64 episode offsets).
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

# Terminal transitions are encoded by shifting their reward down by 100 so the
# diffusion model never has to generate a binary terminal channel.
TERMINAL_REWARD_SHIFT = 100.0
TERMINAL_DECODE_THRESHOLD = -50.0

_STD_CLAMP = 1e-8


class ContainerError(ValueError):
    """Base class for dataset container validation failures."""


class MissingPayloadError(ContainerError):
    """A file named in the manifest (or the manifest itself) is absent."""


class ShapeMismatchError(ContainerError):
    """Binary payload size disagrees with the manifest's declared shape."""


class EpisodeOffsetsError(ContainerError):
    """episode_offsets is not a strictly increasing partition of [0, n_total)."""


@dataclass(frozen=True)
class NormStats:
    """Per-dimension z-score statistics plus dataset-level encoding flags."""

    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray
    rew_mean: float
    rew_std: float
    terminal_encoded: bool = False
    normalized: bool = False

    def to_json(self) -> dict:
        return {
            "obs_mean": self.obs_mean.tolist(),
            "obs_std": self.obs_std.tolist(),
            "act_mean": self.act_mean.tolist(),
            "act_std": self.act_std.tolist(),
            "rew_mean": float(self.rew_mean),
            "rew_std": float(self.rew_std),
            "terminal_encoded": bool(self.terminal_encoded),
            "normalized": bool(self.normalized),
        }

    @staticmethod
    def from_json(d: dict) -> "NormStats":
        return NormStats(
            obs_mean=np.asarray(d["obs_mean"], dtype=np.float64),
            obs_std=np.asarray(d["obs_std"], dtype=np.float64),
            act_mean=np.asarray(d["act_mean"], dtype=np.float64),
            act_std=np.asarray(d["act_std"], dtype=np.float64),
            rew_mean=float(d["rew_mean"]),
            rew_std=float(d["rew_std"]),
            terminal_encoded=bool(d.get("terminal_encoded", False)),
            normalized=bool(d.get("normalized", False)),
        )


def compute_norm_stats(
    observations: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    terminal_encoded: bool = False,
) -> NormStats:
    """Z-score statistics; zero-variance dimensions get std clamped to 1."""

    def _stats(x):
        mean = x.mean(axis=0, dtype=np.float64)
        std = x.std(axis=0, dtype=np.float64)
        std = np.where(std < _STD_CLAMP, 1.0, std)
        return mean, std

    obs_mean, obs_std = _stats(observations)
    act_mean, act_std = _stats(actions)
    rew_mean, rew_std = _stats(rewards.reshape(-1, 1))
    return NormStats(
        obs_mean=obs_mean,
        obs_std=obs_std,
        act_mean=act_mean,
        act_std=act_std,
        rew_mean=float(rew_mean[0]),
        rew_std=float(rew_std[0]),
        terminal_encoded=terminal_encoded,
    )


@dataclass(frozen=True)
class TrajectoryDataset:
    """Immutable episode-segmented transition arrays with normalization stats.

    observations: (n, d_s) float32, actions: (n, d_a) float32,
    rewards: (n,) float32, terminals: (n,) bool,
    episode_offsets: (n_episodes,) int64 start indices, first is 0.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    episode_offsets: np.ndarray
    norm_stats: NormStats
    gamma_default: float = 1.0
    env_id: str = ""

    def __post_init__(self):
        for name in ("observations", "actions", "rewards", "terminals", "episode_offsets"):
            getattr(self, name).flags.writeable = False

    @property
    def n_total(self) -> int:
        return self.observations.shape[0]

    @property
    def n_episodes(self) -> int:
        return self.episode_offsets.shape[0]

    @property
    def state_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def episode_lengths(self) -> np.ndarray:
        return np.diff(self.episode_offsets, append=self.n_total)

    def episode_slice(self, i: int) -> slice:
        start = int(self.episode_offsets[i])
        end = int(self.episode_offsets[i + 1]) if i + 1 < self.n_episodes else self.n_total
        return slice(start, end)


@dataclass(frozen=True)
class SubTrajectory:
    """A horizon-H window: H+1 states, H actions/rewards, and its return."""

    states: np.ndarray      # (H+1, d_s)
    actions: np.ndarray     # (H, d_a)
    rewards: np.ndarray     # (H,)
    source: tuple[int, int]  # (episode index, start offset)
    condition_y: float

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


@dataclass(frozen=True)
class ReweightConfig:
    """Return-weighted sampling parameters.

    Window mode bins window returns into n_bins equal intervals and weights
    bin j by |B_j|/(|B_j|+u) * exp(-|y_max - midpoint_j| / q). Episode mode
    weights successful episodes success_weight times higher than the rest.
    """

    n_bins: int = 50
    count_smoothing: float = 0.001   # u
    distance_smoothing: float = 5.0  # q
    success_weight: float = 10.0     # c, episode mode only
    mode: str = "window"

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")
        if self.distance_smoothing <= 0:
            raise ValueError(f"distance_smoothing must be > 0, got {self.distance_smoothing}")
        if self.count_smoothing < 0:
            raise ValueError(f"count_smoothing must be >= 0, got {self.count_smoothing}")
        if self.mode not in ("window", "episode"):
            raise ValueError(f"mode must be 'window' or 'episode', got {self.mode!r}")


def make_dataset(
    observations: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    terminals: np.ndarray,
    episode_offsets: np.ndarray,
    norm_stats: NormStats | None = None,
    gamma_default: float = 1.0,
    env_id: str = "",
) -> TrajectoryDataset:
    """Assemble and validate a dataset from raw arrays."""
    observations = np.ascontiguousarray(observations, dtype=np.float32)
    actions = np.ascontiguousarray(actions, dtype=np.float32)
    rewards = np.ascontiguousarray(rewards, dtype=np.float32)
    terminals = np.ascontiguousarray(terminals, dtype=bool)
    episode_offsets = np.ascontiguousarray(episode_offsets, dtype=np.int64)

    n = observations.shape[0]
    if observations.ndim != 2 or actions.ndim != 2:
        raise ContainerError("observations and actions must be 2-d arrays")
    for name, arr in (("actions", actions), ("rewards", rewards), ("terminals", terminals)):
        if arr.shape[0] != n:
            raise ShapeMismatchError(f"{name} has {arr.shape[0]} rows, observations has {n}")
    _check_offsets(episode_offsets, n)
    lengths = np.diff(episode_offsets, append=n)
    if (lengths < 2).any():
        bad = int(np.argmax(lengths < 2))
        raise ContainerError(f"episode {bad} has length {int(lengths[bad])}, minimum is 2")
    for name, arr in (("observations", observations), ("actions", actions), ("rewards", rewards)):
        if not np.isfinite(arr).all():
            raise ContainerError(f"{name} contains non-finite values")
    if norm_stats is None:
        norm_stats = compute_norm_stats(observations, actions, rewards)
    return TrajectoryDataset(
        observations=observations,
        actions=actions,
        rewards=rewards,
        terminals=terminals,
        episode_offsets=episode_offsets,
        norm_stats=norm_stats,
        gamma_default=float(gamma_default),
        env_id=env_id,
    )


def _check_offsets(offsets: np.ndarray, n_total: int) -> None:
    if offsets.ndim != 1 or offsets.shape[0] == 0:
        raise EpisodeOffsetsError("episode_offsets must be a non-empty 1-d array")
    if offsets[0] != 0:
        raise EpisodeOffsetsError(f"episode_offsets must start at 0, got {int(offsets[0])}")
    if (np.diff(offsets) <= 0).any():
        raise EpisodeOffsetsError("episode_offsets must be strictly increasing")
    if offsets[-1] >= n_total:
        raise EpisodeOffsetsError(
            f"last episode offset {int(offsets[-1])} is outside [0, {n_total})"
        )


# ---------------------------------------------------------------------------
# Container I/O

_PAYLOADS = {
    "observations.f32": ("<f4", 2),
    "actions.f32": ("<f4", 2),
    "rewards.f32": ("<f4", 1),
    "terminals.u8": ("u1", 1),
    "episode_offsets.u64": ("<u8", 1),
}


def save_dataset(dataset: TrajectoryDataset, path: str | Path) -> None:
    """Write a dataset container directory. Bit-exact reproducible; the
    dataset invariants are re-checked before anything touches disk."""
    make_dataset(
        dataset.observations, dataset.actions, dataset.rewards, dataset.terminals,
        dataset.episode_offsets, norm_stats=dataset.norm_stats,
    )
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "d_s": dataset.state_dim,
        "d_a": dataset.action_dim,
        "n_total": dataset.n_total,
        "n_episodes": dataset.n_episodes,
        "gamma_default": dataset.gamma_default,
        "terminal_encoded": bool(dataset.norm_stats.terminal_encoded),
        "norm_stats": dataset.norm_stats.to_json(),
        "environment": dataset.env_id,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    dataset.observations.astype("<f4").tofile(path / "observations.f32")
    dataset.actions.astype("<f4").tofile(path / "actions.f32")
    dataset.rewards.astype("<f4").tofile(path / "rewards.f32")
    dataset.terminals.astype("u1").tofile(path / "terminals.u8")
    dataset.episode_offsets.astype("<u8").tofile(path / "episode_offsets.u64")


def load_dataset(path: str | Path) -> TrajectoryDataset:
    """Read a dataset container, validating shapes against the manifest."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise MissingPayloadError(f"manifest.json not found under {path}")
    manifest = json.loads(manifest_path.read_text())
    n = int(manifest["n_total"])
    d_s = int(manifest["d_s"])
    d_a = int(manifest["d_a"])
    n_eps = int(manifest["n_episodes"])

    def _read(name: str, dtype: str, count: int, shape: tuple) -> np.ndarray:
        fp = path / name
        if not fp.is_file():
            raise MissingPayloadError(f"payload {name} not found under {path}")
        arr = np.fromfile(fp, dtype=dtype)
        if arr.size != count:
            raise ShapeMismatchError(
                f"{name}: manifest declares {count} values, file holds {arr.size}"
            )
        return arr.reshape(shape)

    observations = _read("observations.f32", "<f4", n * d_s, (n, d_s))
    actions = _read("actions.f32", "<f4", n * d_a, (n, d_a))
    rewards = _read("rewards.f32", "<f4", n, (n,))
    terminals = _read("terminals.u8", "u1", n, (n,)).astype(bool)
    offsets = _read("episode_offsets.u64", "<u8", n_eps, (n_eps,)).astype(np.int64)
    _check_offsets(offsets, n)

    stats_json = manifest.get("norm_stats")
    if stats_json is not None:
        stats = NormStats.from_json(stats_json)
    else:
        stats = compute_norm_stats(
            observations, actions, rewards,
            terminal_encoded=bool(manifest.get("terminal_encoded", False)),
        )
    return make_dataset(
        observations, actions, rewards, terminals, offsets,
        norm_stats=stats,
        gamma_default=float(manifest.get("gamma_default", 1.0)),
        env_id=manifest.get("environment", ""),
    )


# ---------------------------------------------------------------------------
# Terminal encoding

def encode_terminals(dataset: TrajectoryDataset) -> TrajectoryDataset:
    """Shift terminal-transition rewards down by 100 so return conditioning
    carries the termination signal. Applies exactly once; invertible."""
    if dataset.norm_stats.terminal_encoded:
        raise ValueError("terminal encoding already applied to this dataset")
    rewards = dataset.rewards.astype(np.float64)
    rewards[dataset.terminals] -= TERMINAL_REWARD_SHIFT
    rewards = rewards.astype(np.float32)
    stats = dataclasses.replace(
        compute_norm_stats(dataset.observations, dataset.actions, rewards),
        terminal_encoded=True,
    )
    return dataclasses.replace(dataset, rewards=rewards, norm_stats=stats)


def decode_terminals(dataset: TrajectoryDataset) -> TrajectoryDataset:
    """Inverse of encode_terminals (bit-exact on float32 rewards)."""
    if not dataset.norm_stats.terminal_encoded:
        raise ValueError("dataset rewards are not terminal-encoded")
    rewards = dataset.rewards.astype(np.float64)
    rewards[dataset.terminals] += TERMINAL_REWARD_SHIFT
    rewards = rewards.astype(np.float32)
    stats = dataclasses.replace(
        compute_norm_stats(dataset.observations, dataset.actions, rewards),
        terminal_encoded=False,
    )
    return dataclasses.replace(dataset, rewards=rewards, norm_stats=stats)


# ---------------------------------------------------------------------------
# Returns and windowing

def window_return(rewards: np.ndarray, gamma: float) -> float:
    """Discounted sum of a reward window: sum_i gamma^i * rewards[i]."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if gamma == 1.0:
        return float(rewards.sum())
    return float(np.dot(gamma ** np.arange(rewards.shape[0]), rewards))


def count_windows(dataset: TrajectoryDataset, horizon: int, stride: int = 1) -> int:
    lengths = dataset.episode_lengths()
    fits = lengths >= horizon + 1
    return int((((lengths[fits] - horizon - 1) // stride) + 1).sum())


def slice_windows(
    dataset: TrajectoryDataset, horizon: int, stride: int = 1
) -> list[SubTrajectory]:
    """Enumerate horizon-H windows of every episode long enough to hold H+1
    states. Shorter episodes are skipped (with a warning reporting how many).
    """
    if horizon < 1 or stride < 1:
        raise ValueError("horizon and stride must be positive")
    windows: list[SubTrajectory] = []
    n_skipped = 0
    for ep in range(dataset.n_episodes):
        sl = dataset.episode_slice(ep)
        length = sl.stop - sl.start
        if length < horizon + 1:
            n_skipped += 1
            continue
        for t in range(0, length - horizon, stride):
            s = sl.start + t
            rew = dataset.rewards[s : s + horizon]
            windows.append(
                SubTrajectory(
                    states=dataset.observations[s : s + horizon + 1],
                    actions=dataset.actions[s : s + horizon],
                    rewards=rew,
                    source=(ep, t),
                    condition_y=window_return(rew, dataset.gamma_default),
                )
            )
    if not windows:
        raise ValueError(
            f"no episode is long enough for horizon {horizon} (need >= {horizon + 1} rows)"
        )
    if n_skipped:
        warnings.warn(f"skipped {n_skipped} episodes shorter than horizon+1", stacklevel=2)
    return windows


# ---------------------------------------------------------------------------
# Normalization

def normalize(dataset: TrajectoryDataset) -> TrajectoryDataset:
    """Z-score observations/actions/rewards with the dataset's own stats."""
    stats = dataset.norm_stats
    if stats.normalized:
        raise ValueError("dataset is already normalized")
    obs = (dataset.observations - stats.obs_mean) / stats.obs_std
    act = (dataset.actions - stats.act_mean) / stats.act_std
    rew = (dataset.rewards - stats.rew_mean) / stats.rew_std
    return dataclasses.replace(
        dataset,
        observations=obs.astype(np.float32),
        actions=act.astype(np.float32),
        rewards=rew.astype(np.float32),
        norm_stats=dataclasses.replace(stats, normalized=True),
    )


def denormalize(dataset: TrajectoryDataset) -> TrajectoryDataset:
    stats = dataset.norm_stats
    if not stats.normalized:
        raise ValueError("dataset is not normalized")
    obs = dataset.observations * stats.obs_std + stats.obs_mean
    act = dataset.actions * stats.act_std + stats.act_mean
    rew = dataset.rewards * stats.rew_std + stats.rew_mean
    return dataclasses.replace(
        dataset,
        observations=obs.astype(np.float32),
        actions=act.astype(np.float32),
        rewards=rew.astype(np.float32),
        norm_stats=dataclasses.replace(stats, normalized=False),
    )


def normalize_window(window: SubTrajectory, stats: NormStats) -> SubTrajectory:
    return dataclasses.replace(
        window,
        states=((window.states - stats.obs_mean) / stats.obs_std).astype(np.float32),
        actions=((window.actions - stats.act_mean) / stats.act_std).astype(np.float32),
        rewards=((window.rewards - stats.rew_mean) / stats.rew_std).astype(np.float32),
    )


def denormalize_window(window: SubTrajectory, stats: NormStats) -> SubTrajectory:
    return dataclasses.replace(
        window,
        states=(window.states * stats.obs_std + stats.obs_mean).astype(np.float32),
        actions=(window.actions * stats.act_std + stats.act_mean).astype(np.float32),
        rewards=(window.rewards * stats.rew_std + stats.rew_mean).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# Trajectory tensors
#
# A window maps to an (H+1, d_s + d_a + 1) tensor: row t holds
# (state_t, action_t, reward_t) and the final row holds (state_H, 0, 0).
# The padded cells of the final row are excluded from training loss and from
# transition extraction.

def tensor_mask(horizon: int, state_dim: int, action_dim: int) -> np.ndarray:
    """1.0 where the trajectory tensor holds data, 0.0 on the padded cells."""
    mask = np.ones((horizon + 1, state_dim + action_dim + 1), dtype=np.float32)
    mask[horizon, state_dim:] = 0.0
    return mask


def windows_to_tensor(
    windows: list[SubTrajectory], stats: NormStats
) -> tuple[np.ndarray, np.ndarray]:
    """Stack normalized windows into (B, H+1, d_s+d_a+1) plus raw returns (B,)."""
    if not windows:
        raise ValueError("empty window list")
    horizon = windows[0].horizon
    d_s = windows[0].states.shape[1]
    d_a = windows[0].actions.shape[1]
    x = np.zeros((len(windows), horizon + 1, d_s + d_a + 1), dtype=np.float32)
    y = np.empty(len(windows), dtype=np.float64)
    for i, w in enumerate(windows):
        nw = normalize_window(w, stats)
        x[i, :, :d_s] = nw.states
        x[i, :horizon, d_s : d_s + d_a] = nw.actions
        x[i, :horizon, d_s + d_a] = nw.rewards
        y[i] = w.condition_y
    return x, y


def tensor_to_windows(
    x: np.ndarray,
    stats: NormStats,
    state_dim: int,
    action_dim: int,
    sources: list[tuple[int, int]],
    gamma: float,
) -> list[SubTrajectory]:
    """Denormalize generated tensors back into windows; condition_y is
    recomputed from the generated rewards."""
    horizon = x.shape[1] - 1
    out = []
    for i in range(x.shape[0]):
        states = x[i, :, :state_dim] * stats.obs_std + stats.obs_mean
        actions = x[i, :horizon, state_dim : state_dim + action_dim] * stats.act_std + stats.act_mean
        rewards = x[i, :horizon, state_dim + action_dim] * stats.rew_std + stats.rew_mean
        rewards = rewards.astype(np.float32)
        out.append(
            SubTrajectory(
                states=states.astype(np.float32),
                actions=actions.astype(np.float32),
                rewards=rewards,
                source=sources[i],
                condition_y=window_return(rewards, gamma),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Transition extraction (shared by metrics and the replay builder)

def transition_pairs(dataset: TrajectoryDataset) -> tuple[np.ndarray, ...]:
    """(s, a, r, s', done) for every row with a stored successor in its episode.

    The last row of each episode is the successor holder; it contributes its
    observation as s' of the previous row but emits no pair itself.
    """
    n = dataset.n_total
    last_rows = np.zeros(n, dtype=bool)
    ends = np.append(dataset.episode_offsets[1:], n) - 1
    last_rows[ends] = True
    idx = np.nonzero(~last_rows)[0]
    return (
        dataset.observations[idx],
        dataset.actions[idx],
        dataset.rewards[idx],
        dataset.observations[idx + 1],
        dataset.terminals[idx],
    )


def data_row_indices(dataset: TrajectoryDataset) -> np.ndarray:
    """Rows that are genuine (s, a) data points: everything except each
    episode's successor-holder row, unless that row is itself terminal."""
    n = dataset.n_total
    keep = np.ones(n, dtype=bool)
    ends = np.append(dataset.episode_offsets[1:], n) - 1
    keep[ends] = dataset.terminals[ends]
    return np.nonzero(keep)[0]


# ---------------------------------------------------------------------------
# Return-weighted sampling

def window_bin_weights(
    returns: np.ndarray, cfg: ReweightConfig
) -> tuple[np.ndarray, np.ndarray] | None:
    """Bin weights v_j and per-window bin assignment, or None when all
    returns coincide (uniform fallback)."""
    returns = np.asarray(returns, dtype=np.float64)
    lo, hi = returns.min(), returns.max()
    if hi <= lo:
        return None
    edges = np.linspace(lo, hi, cfg.n_bins + 1)
    # Right-closed last bin so the maximum lands in bin n_bins-1.
    assignment = np.clip(np.digitize(returns, edges[1:-1]), 0, cfg.n_bins - 1)
    counts = np.bincount(assignment, minlength=cfg.n_bins).astype(np.float64)
    midpoints = 0.5 * (edges[:-1] + edges[1:])
    weights = (counts / (counts + cfg.count_smoothing)) * np.exp(
        -np.abs(hi - midpoints) / cfg.distance_smoothing
    )
    return weights, assignment


def reweighted_sample(
    dataset: TrajectoryDataset,
    horizon: int,
    cfg: ReweightConfig,
    n: int,
    rng: np.random.Generator,
) -> list[SubTrajectory]:
    """Sample n windows, biased toward high-return bins (with replacement)."""
    if cfg.mode != "window":
        raise ValueError("reweighted_sample requires cfg.mode == 'window'")
    windows = slice_windows(dataset, horizon)
    returns = np.array([w.condition_y for w in windows])
    binned = window_bin_weights(returns, cfg)
    if binned is None:
        warnings.warn("all window returns identical; falling back to uniform sampling",
                      stacklevel=2)
        idx = rng.integers(0, len(windows), size=n)
        return [windows[i] for i in idx]
    weights, assignment = binned
    probs = weights / weights.sum()
    members = [np.nonzero(assignment == j)[0] for j in range(cfg.n_bins)]
    chosen_bins = rng.choice(cfg.n_bins, size=n, p=probs)
    out = []
    for j in chosen_bins:
        pool = members[j]
        out.append(windows[int(pool[rng.integers(0, pool.shape[0])])])
    return out


def episode_success_from_terminals(dataset: TrajectoryDataset) -> np.ndarray:
    """Default success predicate: the episode ended with a terminal."""
    ends = np.append(dataset.episode_offsets[1:], dataset.n_total) - 1
    return dataset.terminals[ends].copy()


def reweighted_episode_sample(
    dataset: TrajectoryDataset,
    horizon: int,
    cfg: ReweightConfig,
    n: int,
    rng: np.random.Generator,
    success: np.ndarray | None = None,
) -> list[SubTrajectory]:
    """Sample windows by first drawing an episode (successful episodes get
    weight success_weight, others 1), then a uniform start offset within it."""
    if cfg.mode != "episode":
        raise ValueError("reweighted_episode_sample requires cfg.mode == 'episode'")
    if success is None:
        success = episode_success_from_terminals(dataset)
    success = np.asarray(success, dtype=bool)
    if success.shape[0] != dataset.n_episodes:
        raise ValueError("success predicate length does not match episode count")
    lengths = dataset.episode_lengths()
    eligible = lengths >= horizon + 1
    if not eligible.any():
        raise ValueError(f"no episode is long enough for horizon {horizon}")
    weights = np.where(success, cfg.success_weight, 1.0) * eligible
    if not (success & eligible).any():
        warnings.warn("no successful episode; falling back to uniform episode sampling",
                      stacklevel=2)
        weights = eligible.astype(np.float64)
    probs = weights / weights.sum()
    episodes = rng.choice(dataset.n_episodes, size=n, p=probs)
    out = []
    for ep in episodes:
        ep = int(ep)
        start = int(dataset.episode_offsets[ep])
        t = int(rng.integers(0, lengths[ep] - horizon))
        s = start + t
        rew = dataset.rewards[s : s + horizon]
        out.append(
            SubTrajectory(
                states=dataset.observations[s : s + horizon + 1],
                actions=dataset.actions[s : s + horizon],
                rewards=rew,
                source=(ep, t),
                condition_y=window_return(rew, dataset.gamma_default),
            )
        )
    return out
