"""Denoising-score-matching training with classifier-free-guidance condition
dropout, plus denoiser checkpoint I/O."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import (
    NormStats,
    ReweightConfig,
    TrajectoryDataset,
    episode_success_from_terminals,
    slice_windows,
    tensor_mask,
    window_bin_weights,
    windows_to_tensor,
)
from .denoiser import DenoiserConfig, DenoiserHandle, _denoise_torch, build_denoiser


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    steps: int = 20_000
    lr: float = 3e-4
    warmup_frac: float = 0.05
    lr_min: float = 1e-6
    cond_dropout: float = 0.25      # lambda: probability of replacing y with null
    sigma_log_mean: float = -1.2    # ln sigma ~ N(mean, std^2) during training
    sigma_log_std: float = 1.2
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must be in [0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


class TrainingDiverged(RuntimeError):
    """Raised when the loss leaves the finite/bounded regime. Carries the
    last good handle so callers can checkpoint it."""

    def __init__(self, message: str, handle: DenoiserHandle, step: int, loss: float):
        super().__init__(message)
        self.handle = handle
        self.step = step
        self.loss = loss


def _edm_weight(sigma: torch.Tensor, sigma_data: float) -> torch.Tensor:
    # 1 / c_out(sigma)^2: uniform weighting in the preconditioned space
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def _dsm_loss_torch(
    net,
    x0: torch.Tensor,
    sigma: torch.Tensor,
    noise: torch.Tensor,
    cond_value: torch.Tensor,
    null_mask: torch.Tensor,
    mask: torch.Tensor,
    sigma_data: float,
    weighting: str = "edm",
    grad: bool = False,
) -> torch.Tensor:
    noised = x0 + sigma[:, None, None] * noise
    denoised = _denoise_torch(net, noised, sigma, cond_value, null_mask, sigma_data, grad=grad)
    per_sample = (((denoised - x0) ** 2) * mask).sum(dim=(1, 2))
    if weighting == "edm":
        per_sample = per_sample * _edm_weight(sigma, sigma_data)
    elif weighting != "none":
        raise ValueError(f"unknown weighting {weighting!r}")
    return per_sample.mean()


def dsm_loss(
    handle: DenoiserHandle,
    batch,
    sigma: np.ndarray | float,
    noise: np.ndarray,
    cond: np.ndarray | None = None,
    dropout_mask: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    weighting: str = "edm",
) -> float:
    """Denoising-score-matching loss of a batch: mean over samples of the
    (optionally EDM-weighted) squared error between D(x0 + sigma*eps) and x0,
    summed over unmasked tensor cells. dropout_mask[i]=True replaces the
    condition of sample i with the null embedding.

    `batch` is either a (B, H+1, C) tensor of normalized trajectories (then
    cond=None means all-null) or a list of SubTrajectory windows, which are
    tensorized with the handle's stats and, when cond is None, conditioned on
    their own scaled returns."""
    if isinstance(batch, (list, tuple)):
        if handle.norm_stats is None:
            raise ValueError("handle has no normalization stats for window batches")
        x0, y_raw = windows_to_tensor(list(batch), handle.norm_stats)
        if cond is None:
            cond = handle.scale_condition(y_raw)
    else:
        x0 = batch
    x0 = np.asarray(x0, dtype=np.float32)
    b = x0.shape[0]
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (b,)).copy()
    if (sig <= 0).any():
        raise ValueError("sigma must be positive")
    if cond is None:
        cond_vals = np.zeros(b)
        null = np.ones(b, dtype=bool)
    else:
        cond = np.asarray(cond, dtype=np.float64)
        null = ~np.isfinite(cond)
        cond_vals = np.where(null, 0.0, cond)
    if dropout_mask is not None:
        null = null | np.asarray(dropout_mask, dtype=bool)
    if mask is None:
        mask = tensor_mask(handle.config.horizon, handle.config.state_dim,
                           handle.config.action_dim)
    loss = _dsm_loss_torch(
        handle.net,
        torch.as_tensor(x0),
        torch.as_tensor(sig, dtype=torch.float32),
        torch.as_tensor(np.asarray(noise, dtype=np.float32)),
        torch.as_tensor(cond_vals, dtype=torch.float32),
        torch.as_tensor(null),
        torch.as_tensor(mask),
        handle.config.sigma_data,
        weighting=weighting,
    )
    value = float(loss)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite dsm loss {value}")
    return value


class WindowBank:
    """Pre-tensorized training windows with uniform, return-reweighted, or
    episode-reweighted index sampling."""

    def __init__(
        self,
        dataset: TrajectoryDataset,
        horizon: int,
        reweight: ReweightConfig | None = None,
    ):
        self.windows = slice_windows(dataset, horizon)
        self.x, self.y_raw = windows_to_tensor(self.windows, dataset.norm_stats)
        self.y_min = float(self.y_raw.min())
        self.y_max = float(self.y_raw.max())
        span = self.y_max - self.y_min
        self.y_scaled = (
            (self.y_raw - self.y_min) / span if span > 0 else np.zeros_like(self.y_raw)
        )
        self._bin_members = None
        self._bin_probs = None
        self._episode_probs = None
        self._episode_members = None
        if reweight is not None and reweight.mode == "window":
            binned = window_bin_weights(self.y_raw, reweight)
            if binned is not None:
                weights, assignment = binned
                keep = weights > 0
                self._bin_probs = weights[keep] / weights[keep].sum()
                self._bin_members = [
                    np.nonzero(assignment == j)[0]
                    for j in np.nonzero(keep)[0]
                ]
        elif reweight is not None and reweight.mode == "episode":
            success = episode_success_from_terminals(dataset)
            episodes = np.array([w.source[0] for w in self.windows])
            present = np.unique(episodes)
            weights = np.where(success[present], reweight.success_weight, 1.0)
            if not success[present].any():
                weights = np.ones_like(weights)
            self._episode_probs = weights / weights.sum()
            self._episode_members = [np.nonzero(episodes == e)[0] for e in present]

    def __len__(self) -> int:
        return self.x.shape[0]

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._bin_probs is not None:
            bins = rng.choice(len(self._bin_probs), size=n, p=self._bin_probs)
            return np.array(
                [self._bin_members[j][rng.integers(0, self._bin_members[j].shape[0])]
                 for j in bins]
            )
        if self._episode_probs is not None:
            eps = rng.choice(len(self._episode_probs), size=n, p=self._episode_probs)
            return np.array(
                [self._episode_members[e][rng.integers(0, self._episode_members[e].shape[0])]
                 for e in eps]
            )
        return rng.integers(0, len(self), size=n)


def _lr_factor(step: int, total: int, warmup_frac: float, lr: float, lr_min: float) -> float:
    warmup = max(1, int(round(total * warmup_frac)))
    if step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    progress = (step - warmup) / (total - warmup)
    floor = lr_min / lr
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(
    handle: DenoiserHandle,
    dataset: TrajectoryDataset,
    cfg: TrainConfig,
    reweight: ReweightConfig | None = None,
    log_path: str | Path | None = None,
) -> tuple[DenoiserHandle, list[dict]]:
    """Run DSM training with condition dropout. Returns the trained handle
    (condition scaler and norm stats attached) and the metrics log."""
    config = handle.config
    bank = WindowBank(dataset, config.horizon, reweight)
    handle.condition_scaler = (bank.y_min, bank.y_max)
    handle.norm_stats = dataset.norm_stats
    handle.terminal_encoded = dataset.norm_stats.terminal_encoded
    mask = tensor_mask(config.horizon, config.state_dim, config.action_dim)
    handle, log = _run_training(
        handle, bank.x, bank.y_scaled, bank.draw, mask, cfg, log_path
    )
    handle.train_meta.update({"gamma": dataset.gamma_default, "env_id": dataset.env_id})
    return handle, log


def fit_tensors(
    handle: DenoiserHandle,
    x: np.ndarray,
    cfg: TrainConfig,
    cond: np.ndarray | None = None,
    mask: np.ndarray | None = None,
) -> tuple[DenoiserHandle, list[dict]]:
    """Fit the denoiser to raw trajectory tensors (B, T, C). Used for
    synthetic fixtures where no dataset plumbing applies; by default every
    tensor cell carries loss."""
    x = np.asarray(x, dtype=np.float32)
    if cond is not None:
        cond = np.asarray(cond, dtype=np.float64)
        lo, hi = float(cond.min()), float(cond.max())
        handle.condition_scaler = (lo, hi)
        span = hi - lo
        y_scaled = (cond - lo) / span if span > 0 else np.zeros_like(cond)
    else:
        y_scaled = None
    if mask is None:
        mask = np.ones(x.shape[1:], dtype=np.float32)
    draw = lambda n, rng: rng.integers(0, x.shape[0], size=n)
    return _run_training(handle, x, y_scaled, draw, mask, cfg, None)


def _run_training(
    handle: DenoiserHandle,
    x_bank: np.ndarray,
    y_scaled: np.ndarray | None,
    draw,
    mask: np.ndarray,
    cfg: TrainConfig,
    log_path: str | Path | None,
) -> tuple[DenoiserHandle, list[dict]]:
    config = handle.config
    rng = np.random.default_rng(cfg.seed)
    mask = torch.as_tensor(np.asarray(mask, dtype=np.float32))
    net = handle.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: _lr_factor(s, cfg.steps, cfg.warmup_frac, cfg.lr, cfg.lr_min)
    )

    log: list[dict] = []
    log_file = open(log_path, "w") if log_path is not None else None
    ema = None
    t_start = time.perf_counter()
    try:
        for step in range(cfg.steps):
            idx = draw(cfg.batch_size, rng)
            x0 = torch.as_tensor(x_bank[idx])
            sigma_np = np.exp(rng.normal(cfg.sigma_log_mean, cfg.sigma_log_std, cfg.batch_size))
            sigma = torch.as_tensor(sigma_np, dtype=torch.float32)
            noise = torch.as_tensor(
                rng.standard_normal(x0.shape, dtype=np.float32)
            )
            drop = rng.random(cfg.batch_size) < cfg.cond_dropout
            if y_scaled is None:
                cond = torch.zeros(cfg.batch_size)
                null = torch.ones(cfg.batch_size, dtype=torch.bool)
            else:
                cond = torch.as_tensor(y_scaled[idx], dtype=torch.float32)
                null = torch.as_tensor(drop)

            loss = _dsm_loss_torch(
                net, x0, sigma, noise, cond, null, mask, config.sigma_data, grad=True
            )
            value = float(loss.detach())
            if not math.isfinite(value) or value > 1e6:
                raise TrainingDiverged(
                    f"loss {value} at step {step}; aborting with last good parameters",
                    handle, step, value,
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()

            ema = value if ema is None else 0.98 * ema + 0.02 * value
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                entry = {
                    "step": step,
                    "loss": value,
                    "loss_smoothed": ema,
                    "lr": float(opt.param_groups[0]["lr"]),
                    "wall_ms": (time.perf_counter() - t_start) * 1e3,
                }
                log.append(entry)
                if log_file is not None:
                    log_file.write(json.dumps(entry) + "\n")
    finally:
        if log_file is not None:
            log_file.close()
    net.eval()
    handle.train_meta = {
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "cond_dropout": cfg.cond_dropout,
        "final_loss": log[-1]["loss"] if log else None,
        "final_loss_smoothed": log[-1]["loss_smoothed"] if log else None,
        "loss_curve": [(e["step"], e["loss_smoothed"]) for e in log],
    }
    return handle, log


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(handle: DenoiserHandle, path: str | Path) -> None:
    header = {
        "config": handle.config.to_json(),
        "condition_scaler": list(handle.condition_scaler),
        "terminal_encoded": handle.terminal_encoded,
        "norm_stats": handle.norm_stats.to_json() if handle.norm_stats else None,
        "train_meta": handle.train_meta,
    }
    arrays = [(name, p.detach().numpy()) for name, p in handle.net.named_parameters()]
    ckpt.write_checkpoint(path, "denoiser", header, arrays)


def load_checkpoint(
    path: str | Path, expected_config: DenoiserConfig | None = None
) -> DenoiserHandle:
    header, arrays = ckpt.read_checkpoint(path, "denoiser")
    config = DenoiserConfig.from_json(header["config"])
    if expected_config is not None:
        for f in dataclasses.fields(DenoiserConfig):
            got = getattr(config, f.name)
            want = getattr(expected_config, f.name)
            if got != want:
                raise ckpt.CheckpointError(
                    f"checkpoint config field {f.name!r} is {got}, expected {want}"
                )
    handle = build_denoiser(config, seed=0)
    with torch.no_grad():
        for name, p in handle.net.named_parameters():
            if name not in arrays:
                raise ckpt.CheckpointError(f"checkpoint is missing parameter {name!r}")
            if tuple(arrays[name].shape) != tuple(p.shape):
                raise ckpt.CheckpointError(
                    f"parameter {name!r} has shape {arrays[name].shape}, expected {tuple(p.shape)}"
                )
            p.copy_(torch.as_tensor(arrays[name]))
    handle.condition_scaler = tuple(header["condition_scaler"])
    handle.terminal_encoded = bool(header.get("terminal_encoded", False))
    stats = header.get("norm_stats")
    handle.norm_stats = NormStats.from_json(stats) if stats else None
    handle.train_meta = header.get("train_meta", {})
    handle.net.eval()
    return handle
