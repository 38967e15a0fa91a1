"""Conditional trajectory denoiser: a temporal U-Net of MLP-Mixer residual
blocks with EDM preconditioning and a scalar return condition.

The network operates on (B, H+1, d_s+d_a+1) tensors. Conditioning enters as
a learned null embedding plus a zero-initialized delta computed from the
scaled return, so an untrained (or never-trained) conditional branch is
exactly the null branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import NormStats


@dataclass(frozen=True)
class DenoiserConfig:
    horizon: int
    state_dim: int
    action_dim: int
    n_blocks: int = 6
    width: int = 128
    time_embed_dim: int = 64
    cond_embed_dim: int = 64
    sigma_data: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.width < self.channels:
            raise ValueError(
                f"width {self.width} is below the channel count {self.channels}"
            )
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")

    @property
    def channels(self) -> int:
        return self.state_dim + self.action_dim + 1

    @property
    def seq_len(self) -> int:
        return self.horizon + 1

    def to_json(self) -> dict:
        return {
            "horizon": self.horizon,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "n_blocks": self.n_blocks,
            "width": self.width,
            "time_embed_dim": self.time_embed_dim,
            "cond_embed_dim": self.cond_embed_dim,
            "sigma_data": self.sigma_data,
        }

    @staticmethod
    def from_json(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(**d)


def _stage_lengths(seq_len: int, n_blocks: int) -> list[int]:
    """Token counts per U-Net stage. Depth is n_blocks//3 capped so the
    bottleneck keeps at least 2 timesteps."""
    depth = n_blocks // 3
    lengths = [seq_len]
    while len(lengths) - 1 < depth:
        nxt = (lengths[-1] + 1) // 2
        if nxt < 2:
            break
        lengths.append(nxt)
    return lengths


class MixerBlock(nn.Module):
    """Pre-norm token-mixing + channel-mixing MLPs with additive embedding."""

    def __init__(self, seq_len: int, width: int, embed_dim: int):
        super().__init__()
        self.norm_token = nn.LayerNorm(width)
        self.token_mlp = nn.Sequential(
            nn.Linear(seq_len, 2 * seq_len), nn.GELU(), nn.Linear(2 * seq_len, seq_len)
        )
        self.embed_proj = nn.Linear(embed_dim, width)
        self.norm_channel = nn.LayerNorm(width)
        self.channel_mlp = nn.Sequential(
            nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width)
        )

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        x = x + self.token_mlp(self.norm_token(x).transpose(1, 2)).transpose(1, 2)
        x = x + self.embed_proj(F.silu(emb)).unsqueeze(1)
        x = x + self.channel_mlp(self.norm_channel(x))
        return x


class TrajectoryMixerUNet(nn.Module):
    """Raw network F_theta(c_in*x, c_noise, cond); preconditioning wraps it."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        lengths = _stage_lengths(config.seq_len, config.n_blocks)
        depth = len(lengths) - 1
        n_mid = config.n_blocks - 2 * depth
        self.stage_lengths = lengths

        w = config.width
        self.proj_in = nn.Linear(config.channels, w)
        self.down_blocks = nn.ModuleList(
            MixerBlock(lengths[d], w, w) for d in range(depth)
        )
        self.mid_blocks = nn.ModuleList(
            MixerBlock(lengths[-1], w, w) for _ in range(n_mid)
        )
        self.up_blocks = nn.ModuleList(
            MixerBlock(lengths[d], w, w) for d in reversed(range(depth))
        )
        self.skip_projs = nn.ModuleList(
            nn.Linear(2 * w, w) for _ in range(depth)
        )
        self.proj_out = nn.Linear(w, config.channels)

        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embed_dim, w), nn.SiLU(), nn.Linear(w, w)
        )
        self.null_embed = nn.Parameter(torch.zeros(w))
        self.cond_mlp = nn.Sequential(
            nn.Linear(1, config.cond_embed_dim), nn.SiLU(),
            nn.Linear(config.cond_embed_dim, w),
        )

    def _sigma_features(self, c_noise: torch.Tensor) -> torch.Tensor:
        # sin/cos features of c_noise at geometrically spaced frequencies;
        # c_noise spans roughly [-1.6, 1.1] over the working sigma range
        half = self.config.time_embed_dim // 2
        freqs = torch.exp(
            torch.linspace(
                0.0, math.log(30.0), half, dtype=c_noise.dtype, device=c_noise.device
            )
        )
        ang = c_noise[:, None] * freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)

    def forward(
        self,
        x: torch.Tensor,
        c_noise: torch.Tensor,
        cond_value: torch.Tensor,
        null_mask: torch.Tensor,
    ) -> torch.Tensor:
        emb = self.time_mlp(self._sigma_features(c_noise))
        cond_in = torch.where(null_mask, torch.zeros_like(cond_value), cond_value)
        delta = self.cond_mlp(cond_in[:, None])
        delta = torch.where(null_mask[:, None], torch.zeros_like(delta), delta)
        emb = emb + self.null_embed[None, :] + delta

        h = self.proj_in(x)
        skips = []
        for block in self.down_blocks:
            h = block(h, emb)
            skips.append(h)
            h = F.avg_pool1d(h.transpose(1, 2), 2, ceil_mode=True).transpose(1, 2)
        for block in self.mid_blocks:
            h = block(h, emb)
        for block, proj in zip(self.up_blocks, self.skip_projs):
            skip = skips.pop()
            h = F.interpolate(
                h.transpose(1, 2), size=skip.shape[1], mode="linear", align_corners=False
            ).transpose(1, 2)
            h = proj(torch.cat([h, skip], dim=2))
            h = block(h, emb)
        return self.proj_out(h)


def _init_parameters(net: TrajectoryMixerUNet, gen: torch.Generator) -> None:
    """Deterministic fan-in uniform init from an explicit generator; the
    output projection and the conditional delta's last layer start at zero."""
    for name, p in net.named_parameters():
        if p.ndim == 2:
            bound = 1.0 / math.sqrt(p.shape[1])
            p.data = (torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * bound
        else:
            p.data = torch.zeros_like(p.data)
    net.proj_out.weight.data.zero_()
    net.proj_out.bias.data.zero_()
    net.cond_mlp[-1].weight.data.zero_()
    net.cond_mlp[-1].bias.data.zero_()


def precondition_coeffs(sigma: np.ndarray | float, sigma_data: float):
    """EDM scalings: c_skip, c_out, c_in, c_noise for noise level sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    sd2 = sigma_data ** 2
    denom = sigma ** 2 + sd2
    c_skip = sd2 / denom
    c_out = sigma * sigma_data / np.sqrt(denom)
    c_in = 1.0 / np.sqrt(denom)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


@dataclass
class DenoiserHandle:
    """A (possibly trained) denoiser with everything needed to run it:
    network weights, architecture config, the train-time condition scaler
    (min/max window return), and the normalization stats of its data."""

    net: TrajectoryMixerUNet
    config: DenoiserConfig
    condition_scaler: tuple[float, float] = (0.0, 1.0)
    norm_stats: NormStats | None = None
    terminal_encoded: bool = False
    train_meta: dict = field(default_factory=dict)

    def scale_condition(self, y: np.ndarray | float) -> np.ndarray:
        """Min-max scale raw returns to the unit interval of the training
        data. Amplified values may exceed 1; they are never clipped."""
        lo, hi = self.condition_scaler
        if hi <= lo:
            return np.zeros_like(np.asarray(y, dtype=np.float64))
        return (np.asarray(y, dtype=np.float64) - lo) / (hi - lo)

    def denoise(
        self,
        x: np.ndarray,
        sigma: float | np.ndarray,
        cond: np.ndarray | None = None,
    ) -> np.ndarray:
        """D(x; sigma, cond) with EDM preconditioning. x is (B, H+1, C) or
        a single (H+1, C) tensor in normalized units; cond holds scaled
        returns with NaN marking the null condition (None = all null)."""
        single = x.ndim == 2
        xb = x[None] if single else x
        out = _denoise_torch(
            self.net,
            torch.as_tensor(np.ascontiguousarray(xb), dtype=torch.float32),
            _sigma_tensor(sigma, xb.shape[0]),
            *_cond_tensors(cond, xb.shape[0]),
            self.config.sigma_data,
        )
        out = out.numpy()
        return out[0] if single else out

    def score(
        self, x: np.ndarray, sigma: float | np.ndarray, cond: np.ndarray | None = None
    ) -> np.ndarray:
        return score_from_denoiser(self, x, sigma, cond)

    def parameter_vector(self) -> np.ndarray:
        with torch.no_grad():
            return np.concatenate(
                [p.detach().numpy().ravel() for p in self.net.parameters()]
            )


def _sigma_tensor(sigma, batch: int) -> torch.Tensor:
    sig = np.asarray(sigma, dtype=np.float64)
    if (sig <= 0).any():
        raise ValueError("sigma must be positive")
    if sig.ndim == 0:
        sig = np.full(batch, float(sig))
    if sig.shape[0] != batch:
        raise ValueError(f"sigma batch {sig.shape[0]} does not match x batch {batch}")
    return torch.as_tensor(sig, dtype=torch.float32)


def _cond_tensors(cond, batch: int):
    if cond is None:
        return (torch.zeros(batch), torch.ones(batch, dtype=torch.bool))
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 0:
        cond = np.full(batch, float(cond))
    if cond.shape[0] != batch:
        raise ValueError(f"cond batch {cond.shape[0]} does not match x batch {batch}")
    null = ~np.isfinite(cond)
    vals = np.where(null, 0.0, cond)
    return (
        torch.as_tensor(vals, dtype=torch.float32),
        torch.as_tensor(null, dtype=torch.bool),
    )


def _denoise_torch(
    net: TrajectoryMixerUNet,
    x: torch.Tensor,
    sigma: torch.Tensor,
    cond_value: torch.Tensor,
    null_mask: torch.Tensor,
    sigma_data: float,
    grad: bool = False,
) -> torch.Tensor:
    sd2 = sigma_data ** 2
    denom = sigma ** 2 + sd2
    c_skip = (sd2 / denom)[:, None, None]
    c_out = (sigma * sigma_data / denom.sqrt())[:, None, None]
    c_in = (1.0 / denom.sqrt())[:, None, None]
    c_noise = sigma.log() / 4.0
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        raw = net(c_in * x, c_noise, cond_value, null_mask)
        return c_skip * x + c_out * raw


def build_denoiser(config: DenoiserConfig, seed: int | np.random.Generator = 0) -> DenoiserHandle:
    """Initialize a denoiser deterministically from a seed."""
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2 ** 63 - 1))
    net = TrajectoryMixerUNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    _init_parameters(net, gen)
    net.eval()
    return DenoiserHandle(net=net, config=config)


def denoise(
    handle: DenoiserHandle,
    x: np.ndarray,
    sigma: float | np.ndarray,
    cond: np.ndarray | None = None,
) -> np.ndarray:
    return handle.denoise(x, sigma, cond)


def score_from_denoiser(
    handle, x: np.ndarray, sigma: float | np.ndarray, cond: np.ndarray | None = None
) -> np.ndarray:
    """Score estimate (D(x; sigma) - x) / sigma^2 for any denoiser-like
    object (trained handle or analytic stand-in)."""
    sig = np.asarray(sigma, dtype=np.float64)
    if (sig <= 0).any():
        raise ValueError("sigma must be positive")
    d = handle.denoise(x, sigma, cond)
    sig2 = sig ** 2 if sig.ndim == 0 else (sig ** 2)[:, None, None]
    return (d - x) / sig2
