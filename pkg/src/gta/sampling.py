"""Noise schedule, stochastic reverse sampler, classifier-free guidance, and
the partial-noising/denoising augmentation core."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .data import (
    SubTrajectory,
    TERMINAL_DECODE_THRESHOLD,
    TERMINAL_REWARD_SHIFT,
    TrajectoryDataset,
    make_dataset,
    tensor_to_windows,
    window_return,
    windows_to_tensor,
)
from .denoiser import DenoiserHandle


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete noise levels sigmas[K] = sigma_max > ... > sigmas[1] =
    sigma_min > sigmas[0] = 0, plus churn parameters for the stochastic
    sampler."""

    sigmas: np.ndarray
    sigma_min: float
    sigma_max: float
    rho: float
    s_churn: float = 80.0
    s_min: float = 0.05
    s_max: float = 50.0
    s_noise: float = 1.003

    @property
    def n_steps(self) -> int:
        return self.sigmas.shape[0] - 1

    def __post_init__(self):
        self.sigmas.flags.writeable = False
        if self.sigmas[0] != 0.0:
            raise ValueError("sigmas[0] must be exactly 0")
        if (np.diff(self.sigmas) <= 0).any():
            raise ValueError("sigmas must be strictly increasing from index 0 to K")


def karras_schedule(
    n_steps: int = 128,
    sigma_min: float = 0.002,
    sigma_max: float = 80.0,
    rho: float = 7.0,
    s_churn: float = 80.0,
    s_min: float = 0.05,
    s_max: float = 50.0,
    s_noise: float = 1.003,
) -> NoiseSchedule:
    """Power-interpolated noise levels between sigma_max and sigma_min with a
    zero terminal level."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    sigmas = np.zeros(n_steps + 1)
    if n_steps == 1:
        sigmas[1] = sigma_max
    else:
        i = np.arange(1, n_steps + 1)
        inv = 1.0 / rho
        sigmas[i] = (
            sigma_max ** inv
            + (n_steps - i) / (n_steps - 1) * (sigma_min ** inv - sigma_max ** inv)
        ) ** rho
    return NoiseSchedule(
        sigmas=sigmas, sigma_min=sigma_min, sigma_max=sigma_max, rho=rho,
        s_churn=s_churn, s_min=s_min, s_max=s_max, s_noise=s_noise,
    )


class SamplingError(RuntimeError):
    pass


def cfg_denoise(
    model,
    x: np.ndarray,
    sigma: float | np.ndarray,
    cond: np.ndarray | None,
    guidance_scale: float,
) -> np.ndarray:
    """Classifier-free-guided denoiser output: conditional and unconditional
    scores combined with weight w in score space, returned as the equivalent
    denoiser estimate (w+1)*D(x|y) - w*D(x|null). w=0 or a null condition
    short-circuits to a single forward pass."""
    if cond is not None and not np.isfinite(np.asarray(cond)).any():
        cond = None
    if cond is None:
        return model.denoise(x, sigma, None)
    if guidance_scale == 0.0:
        return model.denoise(x, sigma, cond)
    d_cond = model.denoise(x, sigma, cond)
    d_null = model.denoise(x, sigma, None)
    return (guidance_scale + 1.0) * d_cond - guidance_scale * d_null


def _normal_rows(rng, shape: tuple) -> np.ndarray:
    """Standard normal draws; rng may be one Generator for the whole batch or
    a sequence of per-row Generators (making output independent of batching)."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    if len(rng) != shape[0]:
        raise ValueError(f"need {shape[0]} per-row generators, got {len(rng)}")
    return np.stack([g.standard_normal(shape[1:]) for g in rng])


def partial_noise(
    x0: np.ndarray,
    noise_ratio: float,
    schedule: NoiseSchedule,
    rng,
) -> tuple[np.ndarray, int]:
    """Forward-diffuse a clean tensor to level k = round(noise_ratio * K)
    (at least 1). Returns the noised tensor and k for the reverse pass."""
    if not 0.0 < noise_ratio <= 1.0:
        raise ValueError(f"noise_ratio must be in (0, 1], got {noise_ratio}")
    k = max(1, int(round(noise_ratio * schedule.n_steps)))
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 2
    xb = x0[None] if single else x0
    noised = xb + schedule.sigmas[k] * _normal_rows(rng, xb.shape)
    return (noised[0] if single else noised), k


def reverse_sample(
    model,
    x_start: np.ndarray,
    k: int,
    schedule: NoiseSchedule,
    cond: np.ndarray | None = None,
    guidance_scale: float = 0.0,
    rng=None,
) -> np.ndarray:
    """Run the stochastic second-order sampler from noise level index k down
    to 0. `model` is anything with a denoise(x, sigma, cond) method."""
    if not 1 <= k <= schedule.n_steps:
        raise ValueError(f"k must be in [1, {schedule.n_steps}], got {k}")
    if rng is None:
        rng = np.random.default_rng(0)
    single = x_start.ndim == 2
    x = np.asarray(x_start, dtype=np.float64)
    x = x[None] if single else x.copy()
    sigmas = schedule.sigmas
    gamma_cap = min(schedule.s_churn / schedule.n_steps, math.sqrt(2.0) - 1.0)

    for i in range(k, 0, -1):
        sig = sigmas[i]
        sig_next = sigmas[i - 1]
        gamma = gamma_cap if (schedule.s_churn > 0 and schedule.s_min <= sig <= schedule.s_max) else 0.0
        sig_hat = sig * (1.0 + gamma)
        if gamma > 0:
            x = x + math.sqrt(sig_hat ** 2 - sig ** 2) * schedule.s_noise * _normal_rows(rng, x.shape)
        denoised = cfg_denoise(model, x, sig_hat, cond, guidance_scale)
        d = (x - denoised) / sig_hat
        x_next = x + (sig_next - sig_hat) * d
        if sig_next > 0:
            denoised_2 = cfg_denoise(model, x_next, sig_next, cond, guidance_scale)
            d2 = (x_next - denoised_2) / sig_next
            x_next = x + (sig_next - sig_hat) * 0.5 * (d + d2)
        if not np.isfinite(x_next).all():
            bad = int(np.argmax(~np.isfinite(x_next).reshape(x_next.shape[0], -1).all(axis=1)))
            raise SamplingError(
                f"non-finite state at schedule index {i - 1} (sigma={sig_next:.4g}), "
                f"first bad batch row {bad}"
            )
        x = x_next
    return x[0] if single else x


@dataclass(frozen=True)
class AugmentConfig:
    """Partial noising/denoising controls: noise_ratio is the fraction of the
    schedule applied forward, return_multiplier amplifies each source
    window's return for conditioning, guidance_scale is the CFG weight."""

    noise_ratio: float = 0.5         # mu
    return_multiplier: float = 1.3   # alpha
    guidance_scale: float = 2.0      # w
    n_transitions: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.noise_ratio <= 1.0:
            raise ValueError(f"noise_ratio must be in (0, 1], got {self.noise_ratio}")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")


def _window_rngs(seed: int, indices: range | list[int]) -> list[np.random.Generator]:
    return [
        np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(int(i),)))
        for i in indices
    ]


def gta_augment(
    handle: DenoiserHandle,
    windows: list[SubTrajectory],
    cfg: AugmentConfig,
    schedule: NoiseSchedule,
    unconditional: bool = False,
    chunk_size: int = 512,
) -> tuple[list[SubTrajectory], list[dict], int]:
    """Augment source windows by partial noising and guided denoising.

    Each window is normalized with the handle's training stats, noised to
    level round(noise_ratio*K), then denoised conditioned on the scaled
    amplified return (or unconditionally). Windows that come back non-finite
    are dropped and counted. Per-window noise streams are derived from
    (cfg.seed, window index), so results do not depend on chunking.

    Returns (augmented windows, provenance records, n_rejected).
    """
    if handle.norm_stats is None:
        raise ValueError("handle has no normalization stats; train or load it first")
    stats = handle.norm_stats
    gamma = float(handle.train_meta.get("gamma", 1.0))
    out_windows: list[SubTrajectory] = []
    provenance: list[dict] = []
    n_rejected = 0

    for start in range(0, len(windows), chunk_size):
        chunk = windows[start : start + chunk_size]
        x0, y_raw = windows_to_tensor(chunk, stats)
        y_amplified = cfg.return_multiplier * y_raw
        cond = None if unconditional else handle.scale_condition(y_amplified)
        rngs = _window_rngs(cfg.seed, range(start, start + len(chunk)))
        noised, k = partial_noise(x0, cfg.noise_ratio, schedule, rngs)
        generated = reverse_sample(
            handle, noised, k, schedule, cond,
            0.0 if unconditional else cfg.guidance_scale, rngs,
        )
        finite = np.isfinite(generated).all(axis=(1, 2))
        n_rejected += int((~finite).sum())
        kept = np.nonzero(finite)[0]
        gen_windows = tensor_to_windows(
            generated[kept].astype(np.float32),
            stats,
            handle.config.state_dim,
            handle.config.action_dim,
            [chunk[i].source for i in kept],
            gamma,
        )
        out_windows.extend(gen_windows)
        for row, w in zip(kept, gen_windows):
            provenance.append(
                {
                    "source_episode": int(chunk[row].source[0]),
                    "source_offset": int(chunk[row].source[1]),
                    "noise_ratio": cfg.noise_ratio,
                    "return_multiplier": cfg.return_multiplier,
                    "guidance_scale": 0.0 if unconditional else cfg.guidance_scale,
                    "conditional": not unconditional,
                    "condition_original": float(y_raw[row]),
                    "condition_value": float(y_amplified[row]) if not unconditional else None,
                    "realized_return": float(w.condition_y),
                }
            )
    return out_windows, provenance, n_rejected


def windows_to_transitions(
    windows: list[SubTrajectory],
    terminal_decode: bool = False,
    gamma: float = 1.0,
    env_id: str = "",
) -> TrajectoryDataset:
    """Stitch generated windows into a dataset fragment: each window becomes
    an episode of H+1 rows whose trailing row only supplies the final next
    state. With terminal_decode, any reward below -50 is shifted up by 100
    and marked terminal."""
    if not windows:
        raise ValueError("no windows to stitch")
    horizon = windows[0].horizon
    obs, act, rew, term, offsets = [], [], [], [], []
    total = 0
    d_a = windows[0].actions.shape[1]
    for w in windows:
        rewards = w.rewards.astype(np.float64)
        terminals = np.zeros(horizon + 1, dtype=bool)
        if terminal_decode:
            hit = rewards < TERMINAL_DECODE_THRESHOLD
            rewards = np.where(hit, rewards + TERMINAL_REWARD_SHIFT, rewards)
            terminals[:horizon] = hit
        offsets.append(total)
        total += horizon + 1
        obs.append(w.states)
        act.append(np.concatenate([w.actions, np.zeros((1, d_a), dtype=np.float32)]))
        rew.append(np.concatenate([rewards.astype(np.float32), np.zeros(1, dtype=np.float32)]))
        term.append(terminals)
    return make_dataset(
        np.concatenate(obs),
        np.concatenate(act),
        np.concatenate(rew),
        np.concatenate(term),
        np.array(offsets),
        gamma_default=gamma,
        env_id=env_id,
    )


def gaussian_noise_augment(
    windows: list[SubTrajectory], std: float = 3e-4, rng: np.random.Generator | None = None
) -> list[SubTrajectory]:
    """Baseline comparison stub: perturb states with small Gaussian noise,
    leaving actions and rewards untouched."""
    if rng is None:
        rng = np.random.default_rng(0)
    out = []
    for w in windows:
        states = w.states + rng.normal(0.0, std, size=w.states.shape)
        out.append(
            dataclasses.replace(
                w,
                states=states.astype(np.float32),
                condition_y=window_return(w.rewards, 1.0),
            )
        )
    return out
